//! Shared coordinate system of the 360° panorama and the circular
//! microphone array.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};

/// Circular microphone array, optionally with a microphone at its center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayGeometry {
    pub ring_radius: f64,
    pub ring_count: usize,
    pub has_center_mic: bool,
    pub speed_of_sound: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        Self {
            ring_radius: 0.0425,
            ring_count: 6,
            has_center_mic: true,
            speed_of_sound: 343.0,
        }
    }
}

impl ArrayGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.ring_radius > 0.0) || self.ring_count < 2 || !(self.speed_of_sound > 0.0) {
            return Err(AsdError::input(format!("invalid array geometry {self:?}")));
        }
        Ok(())
    }

    /// Total microphone count `M`.
    pub fn num_mics(&self) -> usize {
        self.ring_count + usize::from(self.has_center_mic)
    }

    /// Index of the reference channel used for inter-mic phase: the center
    /// microphone when present, otherwise ring microphone 0.
    pub fn reference_mic(&self) -> usize {
        if self.has_center_mic {
            self.ring_count
        } else {
            0
        }
    }

    pub fn ring_azimuth(&self, m: usize) -> f64 {
        TAU * m as f64 / self.ring_count as f64
    }

    /// Microphone positions in meters: ring microphones by increasing
    /// azimuth, then the center microphone.
    pub fn mic_positions(&self) -> Vec<[f64; 3]> {
        let mut out: Vec<[f64; 3]> = (0..self.ring_count)
            .map(|m| {
                let a = self.ring_azimuth(m);
                [self.ring_radius * a.cos(), self.ring_radius * a.sin(), 0.0]
            })
            .collect();
        if self.has_center_mic {
            out.push([0.0, 0.0, 0.0]);
        }
        out
    }

    /// Far-field arrival delay of each microphone relative to the array
    /// origin for a plane wave from `dir`: `tau_m = -(r_m . u) / c`.
    pub fn far_field_delays(&self, azimuth: f64, altitude: f64) -> Vec<f64> {
        let u = unit_vector(azimuth, altitude);
        self.mic_positions()
            .iter()
            .map(|r| -(r[0] * u[0] + r[1] * u[1] + r[2] * u[2]) / self.speed_of_sound)
            .collect()
    }
}

/// Direction and angular size of a head, as seen from the device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalPos {
    /// Radians in `[0, 2π)`.
    pub azimuth: f64,
    /// Radians in `[-π/2, π/2]`.
    pub altitude: f64,
    /// Angular width of the head in radians, `0 < width < π`.
    pub width: f64,
}

impl SphericalPos {
    pub fn new(azimuth: f64, altitude: f64, width: f64) -> Result<Self> {
        let p = Self { azimuth: wrap_angle(azimuth), altitude, width };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..TAU).contains(&self.azimuth)
            && (-PI / 2.0..=PI / 2.0).contains(&self.altitude)
            && self.width > 0.0
            && self.width < PI;
        if !ok {
            return Err(AsdError::input(format!("invalid spherical position {self:?}")));
        }
        Ok(())
    }
}

/// Wrap an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn unit_vector(azimuth: f64, altitude: f64) -> [f64; 3] {
    [altitude.cos() * azimuth.cos(), altitude.cos() * azimuth.sin(), altitude.sin()]
}

/// Great-circle central angle between two directions, in `[0, π]`.
pub fn spherical_distance(a: &SphericalPos, b: &SphericalPos) -> f64 {
    let u = unit_vector(a.azimuth, a.altitude);
    let v = unit_vector(b.azimuth, b.altitude);
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    sin.atan2(cos)
}

/// Axis-aligned rectangle in panorama pixels; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

/// Equirectangular panorama: width spans azimuth `[0, 2π)` linearly, height
/// spans `[altitude_max, altitude_min]` top to bottom. The horizontal axis is
/// cyclic, so a box may straddle the seam as long as its center lies in
/// `[0, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Panorama {
    pub width: usize,
    pub height: usize,
    pub altitude_min: f64,
    pub altitude_max: f64,
}

impl Default for Panorama {
    fn default() -> Self {
        Self {
            width: 10_000,
            height: 1666,
            altitude_min: -PI / 6.0,
            altitude_max: PI / 6.0,
        }
    }
}

impl Panorama {
    pub fn px_per_rad_x(&self) -> f64 {
        self.width as f64 / TAU
    }

    pub fn px_per_rad_y(&self) -> f64 {
        self.height as f64 / (self.altitude_max - self.altitude_min)
    }

    pub fn contains(&self, b: &PixelBox) -> bool {
        let cx = b.x + b.w / 2.0;
        b.w > 0.0
            && b.h > 0.0
            && b.w <= self.width as f64
            && (0.0..self.width as f64).contains(&cx)
            && b.y >= 0.0
            && b.y + b.h <= self.height as f64
    }

    /// Clip a box to the vertical bounds and re-center it horizontally into
    /// `[0, width)`.
    pub fn clip(&self, b: &PixelBox) -> PixelBox {
        let w = b.w.min(self.width as f64);
        let cx = (b.x + b.w / 2.0).rem_euclid(self.width as f64);
        let y0 = b.y.clamp(0.0, self.height as f64);
        let y1 = (b.y + b.h).clamp(0.0, self.height as f64);
        PixelBox { x: cx - w / 2.0, y: y0, w, h: y1 - y0 }
    }

    /// Signed horizontal offset from `a` to `b` along the shorter way round.
    pub fn dx(&self, a: f64, b: f64) -> f64 {
        let w = self.width as f64;
        let d = (b - a).rem_euclid(w);
        if d > w / 2.0 {
            d - w
        } else {
            d
        }
    }

    /// IoU with `b` shifted by a whole panorama width to the copy nearest `a`.
    pub fn iou(&self, a: &PixelBox, b: &PixelBox) -> f64 {
        let (ca, cb) = (a.center().0, b.center().0);
        let shifted = PixelBox { x: b.x + (ca + self.dx(ca, cb)) - cb, ..*b };
        a.iou(&shifted)
    }

    pub fn box_to_spherical(&self, b: &PixelBox) -> Result<SphericalPos> {
        if !self.contains(b) {
            return Err(AsdError::input(format!("box {b:?} outside {}x{} panorama", self.width, self.height)));
        }
        let (cx, cy) = b.center();
        let azimuth = wrap_angle(cx / self.px_per_rad_x());
        let altitude = self.altitude_max - cy / self.px_per_rad_y();
        let width = b.w / self.px_per_rad_x();
        SphericalPos::new(azimuth, altitude, width)
    }

    /// Project a head to a box whose pixel height is `height_ratio` times its
    /// pixel width. Boxes leaving the panorama vertically are shifted inside.
    pub fn spherical_to_box(&self, p: &SphericalPos, height_ratio: f64) -> PixelBox {
        let w = p.width * self.px_per_rad_x();
        let h = w * height_ratio;
        let cx = p.azimuth * self.px_per_rad_x();
        let cy = (self.altitude_max - p.altitude) * self.px_per_rad_y();
        let mut b = PixelBox::from_center(cx, cy, w, h);
        b.y = b.y.clamp(0.0, self.height as f64 - h);
        b
    }
}
