//! Face patch cropping, stacking and augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::geometry::{Panorama, PixelBox};

/// Source of color pixels, values in `[0, 1]`. The horizontal axis wraps.
pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn rgb(&self, x: usize, y: usize) -> [f64; 3];
}

/// In-memory RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }
}

impl Raster for RgbImage {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }
}

pub fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxAdjust {
    pub scale_w: f64,
    pub scale_h: f64,
    /// Downward shift as a fraction of the original box height.
    pub shift_down: f64,
}

impl Default for BoxAdjust {
    fn default() -> Self {
        Self { scale_w: 1.2, scale_h: 1.4, shift_down: 0.15 }
    }
}

/// Scale about the center, shift down, then clip to the panorama.
pub fn adjust_bbox(b: &PixelBox, params: &BoxAdjust, pano: &Panorama) -> PixelBox {
    let (cx, cy) = b.center();
    let adjusted = PixelBox::from_center(cx, cy + params.shift_down * b.h, b.w * params.scale_w, b.h * params.scale_h);
    pano.clip(&adjusted)
}

/// Grayscale patch, row-major `[height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FacePatch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl FacePatch {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Bilinear resize of `b` to `height x width` with half-pixel centers;
/// rows are clamped at the raster border, columns wrap around.
pub fn extract_patch<R: Raster + ?Sized>(src: &R, b: &PixelBox, height: usize, width: usize) -> Result<FacePatch> {
    if !(b.w > 0.0 && b.h > 0.0) || !b.x.is_finite() || !b.y.is_finite() || height == 0 || width == 0 {
        return Err(AsdError::input(format!("degenerate patch box {b:?}")));
    }
    let (sw, sh) = (src.width() as i64, src.height() as i64);
    let xs: Vec<(usize, usize, f64)> = (0..width)
        .map(|j| {
            let x = b.x + (j as f64 + 0.5) * b.w / width as f64 - 0.5;
            let x0 = x.floor();
            let a = x0 as i64;
            (a.rem_euclid(sw) as usize, (a + 1).rem_euclid(sw) as usize, x - x0)
        })
        .collect();
    let mut pixels = Vec::with_capacity(height * width);
    let mut row0 = vec![0.0; width * 2];
    let mut row1 = vec![0.0; width * 2];
    for i in 0..height {
        let y = (b.y + (i as f64 + 0.5) * b.h / height as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = y.floor();
        let fy = y - y0;
        let ya = y0 as usize;
        let yb = (ya + 1).min(sh as usize - 1);
        for (j, &(xa, xb, _)) in xs.iter().enumerate() {
            row0[2 * j] = luminance(src.rgb(xa, ya));
            row0[2 * j + 1] = luminance(src.rgb(xb, ya));
            row1[2 * j] = luminance(src.rgb(xa, yb));
            row1[2 * j + 1] = luminance(src.rgb(xb, yb));
        }
        for (j, &(_, _, fx)) in xs.iter().enumerate() {
            let top = row0[2 * j] * (1.0 - fx) + row0[2 * j + 1] * fx;
            let bottom = row1[2 * j] * (1.0 - fx) + row1[2 * j + 1] * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Ok(FacePatch { height, width, pixels })
}

/// `[l, height, width]`, oldest patch first.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStack {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PatchStack {
    pub fn layer(&self, i: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[i * p..(i + 1) * p]
    }
}

/// Last `l` patches of `history` (oldest first); a short history is padded
/// by repeating its oldest patch.
pub fn stack_patches(history: &[FacePatch], l: usize) -> Result<PatchStack> {
    let Some(newest) = history.last() else {
        return Err(AsdError::input("cannot stack an empty patch history"));
    };
    if l == 0 {
        return Err(AsdError::input("stack depth must be positive"));
    }
    let (h, w) = (newest.height, newest.width);
    if history.iter().any(|p| p.height != h || p.width != w) {
        return Err(AsdError::input("patches in a stack must share their size"));
    }
    let start = history.len().saturating_sub(l);
    let pad = l - (history.len() - start);
    let mut data = Vec::with_capacity(l * h * w);
    for _ in 0..pad {
        data.extend_from_slice(&history[start].pixels);
    }
    for p in &history[start..] {
        data.extend_from_slice(&p.pixels);
    }
    Ok(PatchStack { depth: l, height: h, width: w, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchAugment {
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
}

impl Default for PatchAugment {
    fn default() -> Self {
        Self { max_rotation_deg: 10.0, max_translation_px: 5.0 }
    }
}

impl PatchAugment {
    /// Draw one transform `(angle_rad, tx, ty)`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64, f64) {
        let draw = |rng: &mut R, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let angle = draw(rng, self.max_rotation_deg).to_radians();
        let tx = draw(rng, self.max_translation_px);
        let ty = draw(rng, self.max_translation_px);
        (angle, tx, ty)
    }
}

/// Rotate every layer by `angle` about the patch center, then translate by
/// `(tx, ty)` pixels; samples falling outside use the nearest edge pixel.
pub fn transform_stack(stack: &PatchStack, angle: f64, tx: f64, ty: f64) -> PatchStack {
    if angle == 0.0 && tx == 0.0 && ty == 0.0 {
        return stack.clone();
    }
    let (h, w) = (stack.height, stack.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    // inverse map of each output pixel, shared by all layers
    let taps: Vec<(usize, usize, usize, usize, f64, f64)> = (0..h * w)
        .map(|idx| {
            let (i, j) = (idx / w, idx % w);
            let (dx, dy) = (j as f64 - tx - cx, i as f64 - ty - cy);
            let sx = (c * dx + s * dy + cx).clamp(0.0, w as f64 - 1.0);
            let sy = (-s * dx + c * dy + cy).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (xa, ya) = (x0 as usize, y0 as usize);
            (xa, (xa + 1).min(w - 1), ya, (ya + 1).min(h - 1), sx - x0, sy - y0)
        })
        .collect();
    let mut data = Vec::with_capacity(stack.data.len());
    for layer in 0..stack.depth {
        let img = stack.layer(layer);
        for &(xa, xb, ya, yb, fx, fy) in &taps {
            let top = img[ya * w + xa] * (1.0 - fx) + img[ya * w + xb] * fx;
            let bottom = img[yb * w + xa] * (1.0 - fx) + img[yb * w + xb] * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    PatchStack { data, ..*stack }
}

pub fn augment_patch_stack<R: Rng>(stack: &PatchStack, params: &PatchAugment, rng: &mut R) -> PatchStack {
    let (angle, tx, ty) = params.sample(rng);
    transform_stack(stack, angle, tx, ty)
}
