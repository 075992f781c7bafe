use std::f64::consts::{PI, TAU};

use rand::Rng;

use super::generate::{stream_rng, STREAM_IDENTITY};
use super::{MeetingRecord, MeetingSpec};
use crate::visual::Raster;

/// Per-participant constants: voice and face appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub f0: f64,
    pub harmonic_phases: Vec<f64>,
    /// Syllabic envelope rate in Hz.
    pub envelope_rate: f64,
    pub envelope_phase: f64,
    pub skin: [f64; 3],
    pub stripe_freq: f64,
    pub stripe_phase: f64,
    /// Mouth brightness while closed.
    pub mouth_base: f64,
}

impl Identity {
    pub fn new(spec: &MeetingSpec, index: usize) -> Self {
        let p = &spec.participants[index];
        let mut rng = stream_rng(spec.seed, p.id, STREAM_IDENTITY);
        let f0 = rng.gen_range(100.0..300.0);
        let count = ((4500.0 / f0) as usize).max(1);
        let harmonic_phases = (0..count).map(|_| rng.gen_range(0.0..TAU)).collect();
        let envelope_rate = rng.gen_range(2.0..6.0);
        let envelope_phase = rng.gen_range(0.0..TAU);
        let tone = rng.gen_range(0.55..0.85);
        let skin = [tone, tone * rng.gen_range(0.75..0.9), tone * rng.gen_range(0.55..0.75)];
        let stripe_freq = rng.gen_range(2.0..6.0);
        let stripe_phase = rng.gen_range(0.0..TAU);
        let mouth_base = rng.gen_range(0.45..0.65);
        Self { f0, harmonic_phases, envelope_rate, envelope_phase, skin, stripe_freq, stripe_phase, mouth_base }
    }

    /// Syllabic envelope in `[0, 1]`.
    pub fn envelope(&self, t: f64) -> f64 {
        0.5 + 0.5 * (TAU * self.envelope_rate * t + self.envelope_phase).sin()
    }
}

struct Head {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    skin: [f64; 3],
    stripe_freq: f64,
    stripe_phase: f64,
    mouth: f64,
}

/// Procedural panorama of one video frame.
pub struct FrameView<'a> {
    record: &'a MeetingRecord,
    heads: Vec<Head>,
}

impl<'a> FrameView<'a> {
    pub fn new(record: &'a MeetingRecord, frame: usize) -> Self {
        let spec = &record.spec;
        let t = spec.tick_time_s(frame);
        let heads = record.tracks[frame.min(record.tracks.len() - 1)]
            .iter()
            .enumerate()
            .map(|(i, tp)| {
                let id = Identity::new(spec, i);
                let (cx, cy) = tp.bbox.center();
                Head {
                    cx,
                    cy,
                    half_w: tp.bbox.w / 2.0,
                    half_h: tp.bbox.h / 2.0,
                    skin: id.skin,
                    stripe_freq: id.stripe_freq,
                    stripe_phase: id.stripe_phase,
                    mouth: mouth_brightness(record, i, frame, &id, t),
                }
            })
            .collect();
        Self { record, heads }
    }

    /// Brightness of participant `index`'s mouth in this frame.
    pub fn mouth(&self, index: usize) -> f64 {
        self.heads[index].mouth
    }
}

fn mouth_brightness(record: &MeetingRecord, index: usize, frame: usize, id: &Identity, t: f64) -> f64 {
    let speaking = record.tick_label(frame, index).unwrap_or(false);
    if speaking {
        id.mouth_base - record.spec.render.mouth_amplitude * id.envelope(t)
    } else {
        id.mouth_base
    }
}

impl Raster for FrameView<'_> {
    fn width(&self) -> usize {
        self.record.spec.panorama.width
    }

    fn height(&self) -> usize {
        self.record.spec.panorama.height
    }

    fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let width = self.width() as f64;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        for h in &self.heads {
            let mut dx = (px - h.cx).rem_euclid(width);
            if dx >= width / 2.0 {
                dx -= width;
            }
            let u = dx / h.half_w;
            let v = (py - h.cy) / h.half_h;
            if u * u + v * v > 1.0 {
                continue;
            }
            if u.abs() <= 0.35 && (0.35..=0.55).contains(&v) {
                return [h.mouth; 3];
            }
            for eye in [-0.35, 0.35] {
                if (u - eye).powi(2) + (v + 0.2).powi(2) <= 0.01 {
                    return [0.1; 3];
                }
            }
            let shade = 1.0 + 0.15 * (h.stripe_freq * PI * (u + 0.5 * v) + h.stripe_phase).sin();
            return h.skin.map(|c| (c * shade).clamp(0.0, 1.0));
        }
        let g = 0.3 + 0.05 * (px * 0.013).sin() + 0.05 * (py * 0.021).cos();
        [g * 0.9, g, g * 1.1]
    }
}
