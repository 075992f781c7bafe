//! Multi-channel STFT features and channel-swap augmentation.

use std::f64::consts::TAU;
use std::sync::Arc;

pub use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};
use crate::geometry::ArrayGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
    pub fft_bins: usize,
}

impl Default for StftParams {
    fn default() -> Self {
        Self { window: 512, hop: 160, fft_bins: 512 }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hop == 0 || self.window > self.fft_bins {
            return Err(AsdError::input(format!("invalid STFT parameters {self:?}")));
        }
        Ok(())
    }

    /// One-sided bin count `F`.
    pub fn bins(&self) -> usize {
        self.fft_bins / 2 + 1
    }

    /// Frame count `T_B` for a signal of `n` samples (no centering).
    pub fn frames(&self, n: usize) -> Result<usize> {
        if n < self.window {
            return Err(AsdError::input(format!("signal of {n} samples shorter than window {}", self.window)));
        }
        Ok((n - self.window) / self.hop + 1)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()).collect()
}

/// Reusable STFT plan.
pub struct Stft {
    params: StftParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(params.fft_bins);
        Ok(Self { params, window: hann(params.window), fft })
    }

    pub fn params(&self) -> StftParams {
        self.params
    }

    /// Hann-windowed one-sided spectrum, `[T_B][F]`.
    pub fn process(&self, signal: &[f64]) -> Result<Vec<Vec<Complex64>>> {
        let frames = self.params.frames(signal.len())?;
        let bins = self.params.bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); self.params.fft_bins];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let start = t * self.params.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (i, (&x, &w)) in signal[start..start + self.params.window].iter().zip(&self.window).enumerate() {
                buf[i] = Complex64::new(x * w, 0.0);
            }
            self.fft.process(&mut buf);
            out.push(buf[..bins].to_vec());
        }
        Ok(out)
    }
}

pub fn stft(signal: &[f64], params: StftParams) -> Result<Vec<Vec<Complex64>>> {
    Stft::new(params)?.process(signal)
}

/// `M` channels of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelAudio {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl MultiChannelAudio {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let n = channels.first().map(Vec::len).unwrap_or(0);
        if channels.is_empty() || channels.iter().any(|c| c.len() != n) || sample_rate == 0 {
            return Err(AsdError::input("audio channels must be non-empty and of equal length"));
        }
        Ok(Self { channels, sample_rate })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[2M, T_B, F]` feature tensor; plane `2m` is `log(|S^m| + eps)`, plane
/// `2m + 1` is `arg(S^m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub mics: usize,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl AudioFeatures {
    pub fn shape(&self) -> [usize; 3] {
        [2 * self.mics, self.frames, self.bins]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.frames * self.bins;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn log_magnitude(&self, mic: usize) -> &[f64] {
        self.plane(2 * mic)
    }

    pub fn phase(&self, mic: usize) -> &[f64] {
        self.plane(2 * mic + 1)
    }
}

pub const DEFAULT_EPS: f64 = 1e-6;

pub fn extract_features(audio: &MultiChannelAudio, stft: &Stft, eps: f64) -> Result<AudioFeatures> {
    let frames = stft.params().frames(audio.len())?;
    let bins = stft.params().bins();
    let mut data = Vec::with_capacity(2 * audio.num_channels() * frames * bins);
    for ch in &audio.channels {
        let spec = stft.process(ch)?;
        let mut phase = Vec::with_capacity(frames * bins);
        for row in &spec {
            for c in row {
                data.push((c.norm() + eps).ln());
                // arg(0) is defined as 0, also for a signed-zero real part
                phase.push(if c.re == 0.0 && c.im == 0.0 { 0.0 } else { c.im.atan2(c.re) });
            }
        }
        data.extend(phase);
    }
    Ok(AudioFeatures { mics: audio.num_channels(), frames, bins, data })
}

/// Source index for each output channel after rotating the ring by `k`
/// positions: `out[m] = in[perm[m]]`. Non-ring channels map to themselves.
pub fn ring_permutation(k: usize, geometry: &ArrayGeometry) -> Result<Vec<usize>> {
    let ring = geometry.ring_count;
    if k >= ring {
        return Err(AsdError::input(format!("channel swap k={k} outside 0..{ring}")));
    }
    Ok((0..geometry.num_mics())
        .map(|m| if m < ring { (m + ring - k) % ring } else { m })
        .collect())
}

/// Azimuth offset matching a ring rotation by `k` positions.
pub fn swap_offset(k: usize, geometry: &ArrayGeometry) -> f64 {
    TAU * k as f64 / geometry.ring_count as f64
}

pub fn channel_swap_audio(audio: &MultiChannelAudio, k: usize, geometry: &ArrayGeometry) -> Result<(MultiChannelAudio, f64)> {
    if audio.num_channels() != geometry.num_mics() {
        return Err(AsdError::shape("channel_swap", geometry.num_mics(), audio.num_channels()));
    }
    let perm = ring_permutation(k, geometry)?;
    let channels = perm.iter().map(|&src| audio.channels[src].clone()).collect();
    Ok((MultiChannelAudio { channels, sample_rate: audio.sample_rate }, swap_offset(k, geometry)))
}

pub fn channel_swap_features(f: &AudioFeatures, k: usize, geometry: &ArrayGeometry) -> Result<(AudioFeatures, f64)> {
    if f.mics != geometry.num_mics() {
        return Err(AsdError::shape("channel_swap", geometry.num_mics(), f.mics));
    }
    let perm = ring_permutation(k, geometry)?;
    let mut data = Vec::with_capacity(f.data.len());
    for &src in &perm {
        data.extend_from_slice(f.plane(2 * src));
        data.extend_from_slice(f.plane(2 * src + 1));
    }
    Ok((AudioFeatures { data, ..*f }, swap_offset(k, geometry)))
}

/// Fixed band-wise summary of the feature tensor: for each ring microphone
/// and band, the normalized cross-spectrum against the reference microphone
/// (real and imaginary part), followed by the log band energy averaged over
/// all microphones.
///
/// Layout: `[ring_count][bands][re, im]` then `[bands]`. Rotating the ring
/// permutes the ring blocks the same way the channels are permuted, and
/// leaves the energy block unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossSpectralParams {
    pub bands: usize,
    pub bins_per_band: usize,
    /// Drop the cross-spectral block, keeping only the energies.
    pub single_channel: bool,
}

impl CrossSpectralParams {
    pub fn dim(&self, geometry: &ArrayGeometry) -> usize {
        if self.single_channel {
            self.bands
        } else {
            geometry.ring_count * self.bands * 2 + self.bands
        }
    }

    pub fn summarize(&self, f: &AudioFeatures, geometry: &ArrayGeometry, eps: f64) -> Result<Vec<f64>> {
        if f.mics != geometry.num_mics() || 1 + self.bands * self.bins_per_band > f.bins {
            return Err(AsdError::shape("cross_spectral", (geometry.num_mics(), self.bands * self.bins_per_band + 1), (f.mics, f.bins)));
        }
        let spectra: Vec<Vec<Complex64>> = (0..f.mics)
            .map(|m| {
                f.log_magnitude(m)
                    .iter()
                    .zip(f.phase(m))
                    .map(|(&lm, &ph)| Complex64::from_polar((lm.exp() - eps).max(0.0), ph))
                    .collect()
            })
            .collect();
        let r = geometry.reference_mic();
        let band_bins = |b: usize| 1 + b * self.bins_per_band..1 + (b + 1) * self.bins_per_band;
        let power = |m: usize, b: usize| -> f64 {
            let mut p = 0.0;
            for t in 0..f.frames {
                for k in band_bins(b) {
                    p += spectra[m][t * f.bins + k].norm_sqr();
                }
            }
            p
        };
        let mut out = Vec::with_capacity(self.dim(geometry));
        let ref_power: Vec<f64> = (0..self.bands).map(|b| power(r, b)).collect();
        if !self.single_channel {
            for m in 0..geometry.ring_count {
                for b in 0..self.bands {
                    let mut cross = Complex64::new(0.0, 0.0);
                    for t in 0..f.frames {
                        for k in band_bins(b) {
                            let i = t * f.bins + k;
                            cross += spectra[m][i] * spectra[r][i].conj();
                        }
                    }
                    let norm = (power(m, b) * ref_power[b]).sqrt();
                    let c = if norm > 1e-20 { cross / norm } else { Complex64::new(0.0, 0.0) };
                    out.push(c.re);
                    out.push(c.im);
                }
            }
        }
        let cells = (f.frames * self.bins_per_band * f.mics) as f64;
        for b in 0..self.bands {
            // mean over microphones keeps the block invariant to ring rotation
            let total: f64 = (0..f.mics).map(|m| power(m, b)).sum();
            out.push(0.1 * (total / cells + 1e-10).ln());
        }
        Ok(out)
    }

    /// Apply a ring rotation to an already summarized vector.
    pub fn swap(&self, summary: &[f64], k: usize, geometry: &ArrayGeometry) -> Result<Vec<f64>> {
        if summary.len() != self.dim(geometry) {
            return Err(AsdError::shape("cross_spectral_swap", self.dim(geometry), summary.len()));
        }
        let perm = ring_permutation(k, geometry)?;
        if self.single_channel {
            return Ok(summary.to_vec());
        }
        let block = self.bands * 2;
        let mut out = Vec::with_capacity(summary.len());
        for &src in &perm[..geometry.ring_count] {
            out.extend_from_slice(&summary[src * block..(src + 1) * block]);
        }
        out.extend_from_slice(&summary[geometry.ring_count * block..]);
        Ok(out)
    }
}
