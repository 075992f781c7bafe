use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use super::render::Identity;
use super::{Activity, MeetingRecord, MeetingSpec, TrackPoint, LABEL_BIN_MS};
use crate::audio::MultiChannelAudio;
use crate::error::Result;
use crate::geometry::PixelBox;

/// Power of a continuously active unit-RMS source at 1 m after the
/// syllabic envelope (`E[(0.5 + 0.5 sin)^2] = 3/8`). Noise levels are set
/// relative to this, so they do not depend on how much speech a meeting has.
pub const NOMINAL_SOURCE_POWER: f64 = 0.375;

/// Random stream keyed by meeting seed, participant and purpose; streams
/// never depend on placement, so rotated scenes share their sources.
pub(crate) fn stream_rng(seed: u64, key: u64, purpose: u64) -> ChaCha8Rng {
    let mut x = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

pub(crate) const STREAM_IDENTITY: u64 = 0;
const STREAM_SPEECH: u64 = 1;
pub(crate) const STREAM_JITTER: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Speaking state per 200 ms bin for participant `index`.
pub fn speech_timeline(spec: &MeetingSpec, index: usize) -> Vec<bool> {
    let p = &spec.participants[index];
    let bins = spec.num_label_bins();
    match p.activity {
        Activity::Always => vec![true; bins],
        Activity::Silent => vec![false; bins],
        Activity::Markov => {
            let mut rng = stream_rng(spec.seed, p.id, STREAM_SPEECH);
            let bin_s = LABEL_BIN_MS as f64 / 1000.0;
            let p_stop = (bin_s / spec.speech.mean_on_s).min(1.0);
            let p_start = (bin_s / spec.speech.mean_off_s).min(1.0);
            let stationary_on = spec.speech.mean_on_s / (spec.speech.mean_on_s + spec.speech.mean_off_s);
            let mut on = rng.gen_bool(stationary_on);
            (0..bins)
                .map(|_| {
                    let cur = on;
                    on = if on { !rng.gen_bool(p_stop) } else { rng.gen_bool(p_start) };
                    cur
                })
                .collect()
        }
    }
}

/// Dry source waveform: a unit-RMS harmonic complex times the syllabic
/// envelope, gated by the speaking timeline.
pub fn source_signal(spec: &MeetingSpec, identity: &Identity, timeline: &[bool]) -> Vec<f64> {
    let n = spec.num_samples();
    let sr = spec.sample_rate as f64;
    let samples_per_bin = sr * LABEL_BIN_MS as f64 / 1000.0;
    let harmonics: Vec<(f64, f64, f64)> = identity
        .harmonic_phases
        .iter()
        .enumerate()
        .map(|(i, &ph)| {
            let h = (i + 1) as f64;
            (TAU * h * identity.f0 / sr, 1.0 / h, ph)
        })
        .collect();
    let rms = (harmonics.iter().map(|h| h.1 * h.1).sum::<f64>() / 2.0).sqrt();
    (0..n)
        .map(|i| {
            let bin = (i as f64 / samples_per_bin) as usize;
            if !timeline.get(bin).copied().unwrap_or(false) {
                return 0.0;
            }
            let t = i as f64 / sr;
            let tone: f64 = harmonics.iter().map(|&(w, a, ph)| a * (w * i as f64 + ph).sin()).sum();
            tone / rms * identity.envelope(t)
        })
        .collect()
}

/// Generate a meeting. Pure function of the spec.
pub fn generate(spec: &MeetingSpec) -> Result<MeetingRecord> {
    spec.validate()?;
    let n = spec.num_samples();
    let m = spec.geometry.num_mics();
    let fft_len = (n + 64).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(fft_len);
    let inverse = planner.plan_fft_inverse(fft_len);
    let sr = spec.sample_rate as f64;

    let mut labels = Vec::with_capacity(spec.participants.len());
    let mut mic_spectra = vec![vec![Complex64::new(0.0, 0.0); fft_len]; m];
    for (idx, p) in spec.participants.iter().enumerate() {
        let timeline = speech_timeline(spec, idx);
        let identity = Identity::new(spec, idx);
        let dry = source_signal(spec, &identity, &timeline);
        labels.push(timeline);
        if dry.iter().all(|&x| x == 0.0) {
            continue;
        }
        let mut spec_buf: Vec<Complex64> = dry.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        spec_buf.resize(fft_len, Complex64::new(0.0, 0.0));
        forward.process(&mut spec_buf);
        let gain = 1.0 / p.distance;
        let pos = p.position();
        let delays = spec.geometry.far_field_delays(pos.azimuth, pos.altitude);
        for (acc, &tau) in mic_spectra.iter_mut().zip(&delays) {
            for (k, (a, x)) in acc.iter_mut().zip(&spec_buf).enumerate() {
                // signed frequency of bin k, Nyquist treated as positive
                let f = if k <= fft_len / 2 { k as f64 } else { k as f64 - fft_len as f64 } * sr / fft_len as f64;
                let mut shift = Complex64::from_polar(gain, -TAU * f * tau);
                if k == fft_len / 2 {
                    // keep the Nyquist bin real so the output stays real
                    shift = Complex64::new(gain * (TAU * f * tau).cos(), 0.0);
                }
                *a += x * shift;
            }
        }
    }

    let mut channels: Vec<Vec<f64>> = mic_spectra
        .into_iter()
        .map(|mut s| {
            inverse.process(&mut s);
            s[..n].iter().map(|c| c.re / fft_len as f64).collect()
        })
        .collect();

    if let Some(snr) = spec.snr_db {
        let sigma = (NOMINAL_SOURCE_POWER * 10f64.powf(-snr / 10.0)).sqrt();
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for (mi, ch) in channels.iter_mut().enumerate() {
            let mut rng = stream_rng(spec.seed, mi as u64, STREAM_NOISE);
            ch.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
    }
    let peak = channels.iter().flatten().fold(0.0f64, |a, &x| a.max(x.abs()));
    let scale = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    for ch in &mut channels {
        // f32 quantization makes the PCM file round trip exact
        ch.iter_mut().for_each(|x| *x = ((*x * scale) as f32) as f64);
    }

    let tracks = tracks(spec);
    Ok(MeetingRecord {
        spec: spec.clone(),
        audio: MultiChannelAudio::new(channels, spec.sample_rate)?,
        tracks,
        labels,
    })
}

fn tracks(spec: &MeetingSpec) -> Vec<Vec<TrackPoint>> {
    let frames = spec.num_ticks();
    let pano = &spec.panorama;
    let mut out = vec![Vec::with_capacity(spec.participants.len()); frames];
    for p in &spec.participants {
        let base = pano.spherical_to_box(&p.position(), spec.render.height_ratio);
        let mut rng = stream_rng(spec.seed, p.id, STREAM_JITTER);
        let j = spec.render.jitter_px;
        for (frame, row) in out.iter_mut().enumerate() {
            let (dx, dy) = if j > 0.0 { (rng.gen_range(-j..=j), rng.gen_range(-j..=j)) } else { (0.0, 0.0) };
            let y = (base.y + dy).clamp(0.0, pano.height as f64 - base.h);
            let bbox = pano.clip(&PixelBox { x: base.x + dx, y, w: base.w, h: base.h });
            let pos = pano.box_to_spherical(&bbox).expect("track box inside panorama");
            row.push(TrackPoint {
                frame,
                participant_id: p.id,
                bbox,
                azimuth: pos.azimuth,
                altitude: pos.altitude,
                width: pos.width,
            });
        }
    }
    out
}
