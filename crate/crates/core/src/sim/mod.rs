//! Deterministic synthetic meetings: multi-channel audio, head tracks,
//! rendered faces with speech-driven mouths and 200 ms speaking labels.

mod generate;
mod io;
mod render;

pub use generate::{generate, source_signal, speech_timeline, NOMINAL_SOURCE_POWER};
pub use io::{load_meeting, save_meeting};
pub use render::{FrameView, Identity};

use serde::{Deserialize, Serialize};

use crate::audio::MultiChannelAudio;
use crate::error::{AsdError, Result};
use crate::geometry::{wrap_angle, ArrayGeometry, Panorama, PixelBox, SphericalPos};

/// Width of a label bin in milliseconds.
pub const LABEL_BIN_MS: u64 = 200;

/// How a participant's speaking timeline is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    /// On/off Markov chain over label bins.
    #[default]
    Markov,
    Always,
    Silent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSpec {
    pub id: u64,
    /// Radians.
    pub azimuth: f64,
    /// Radians.
    pub altitude: f64,
    /// Meters from the array center.
    pub distance: f64,
    /// Physical head width in meters.
    pub head_width: f64,
    #[serde(default)]
    pub activity: Activity,
}

impl ParticipantSpec {
    /// Angular head width seen from the device.
    pub fn angular_width(&self) -> f64 {
        2.0 * (self.head_width / 2.0 / self.distance).atan()
    }

    pub fn position(&self) -> SphericalPos {
        SphericalPos { azimuth: wrap_angle(self.azimuth), altitude: self.altitude, width: self.angular_width() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeechModel {
    pub mean_on_s: f64,
    pub mean_off_s: f64,
}

impl Default for SpeechModel {
    fn default() -> Self {
        Self { mean_on_s: 4.0, mean_off_s: 6.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    /// Mouth darkening at full envelope.
    pub mouth_amplitude: f64,
    /// Maximum per-axis head jitter in pixels.
    pub jitter_px: f64,
    /// Head box height over width.
    pub height_ratio: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self { mouth_amplitude: 0.4, jitter_px: 1.0, height_ratio: 1.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeetingSpec {
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Video frames and prediction ticks share this rate.
    pub tick_rate: f64,
    pub geometry: ArrayGeometry,
    pub panorama: Panorama,
    pub speech: SpeechModel,
    /// `None` renders noiseless audio.
    pub snr_db: Option<f64>,
    pub render: RenderParams,
    pub participants: Vec<ParticipantSpec>,
}

impl MeetingSpec {
    pub fn new(seed: u64, duration_s: f64, participants: Vec<ParticipantSpec>) -> Self {
        Self {
            seed,
            duration_s,
            sample_rate: 16_000,
            tick_rate: 7.5,
            geometry: ArrayGeometry::default(),
            panorama: Panorama::default(),
            speech: SpeechModel::default(),
            snr_db: Some(20.0),
            render: RenderParams::default(),
            participants,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let bad = |m: String| Err(AsdError::input(m));
        if !(self.duration_s > 0.0) || self.sample_rate == 0 || !(self.tick_rate > 0.0) {
            return bad(format!("invalid duration/rates in meeting {}", self.seed));
        }
        if self.participants.is_empty() || self.participants.len() > 14 {
            return bad(format!("{} participants, expected 1..=14", self.participants.len()));
        }
        if !(self.speech.mean_on_s > 0.0 && self.speech.mean_off_s > 0.0) {
            return bad("speech means must be positive".into());
        }
        let mut ids: Vec<u64> = self.participants.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.participants.len() {
            return bad("participant ids must be unique".into());
        }
        for p in &self.participants {
            if !(0.5..=3.0).contains(&p.distance) || !(p.head_width > 0.0) || !p.azimuth.is_finite() {
                return bad(format!("participant {} has invalid placement", p.id));
            }
            let pos = p.position();
            pos.validate()?;
            let b = self.panorama.spherical_to_box(&pos, self.render.height_ratio);
            if b.h >= self.panorama.height as f64 || pos.altitude > self.panorama.altitude_max || pos.altitude < self.panorama.altitude_min {
                return bad(format!("participant {} is outside the panorama", p.id));
            }
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    pub fn num_ticks(&self) -> usize {
        (self.duration_s * self.tick_rate).floor() as usize + 1
    }

    pub fn num_label_bins(&self) -> usize {
        ((self.duration_s * 1000.0) / LABEL_BIN_MS as f64).ceil() as usize
    }

    pub fn tick_time_s(&self, tick: usize) -> f64 {
        tick as f64 / self.tick_rate
    }

    /// Milliseconds since the start, rounded down.
    pub fn tick_time_ms(&self, tick: usize) -> u64 {
        (tick as f64 * 1000.0 / self.tick_rate + 1e-9).floor() as u64
    }
}

/// Shift every participant's azimuth by `angle` (wrapped into `[0, 2π)`).
pub fn rotate_scene(spec: &MeetingSpec, angle: f64) -> MeetingSpec {
    let mut out = spec.clone();
    let a = wrap_angle(angle);
    if a != 0.0 {
        for p in &mut out.participants {
            p.azimuth = wrap_angle(p.azimuth + a);
        }
    }
    out
}

/// One participant's head in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: usize,
    pub participant_id: u64,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub azimuth: f64,
    pub altitude: f64,
    pub width: f64,
}

impl TrackPoint {
    pub fn position(&self) -> SphericalPos {
        SphericalPos { azimuth: self.azimuth, altitude: self.altitude, width: self.width }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeetingRecord {
    pub spec: MeetingSpec,
    pub audio: MultiChannelAudio,
    /// `tracks[frame][participant index]`.
    pub tracks: Vec<Vec<TrackPoint>>,
    /// `labels[participant index][bin]`.
    pub labels: Vec<Vec<bool>>,
}

impl MeetingRecord {
    pub fn participant_index(&self, id: u64) -> Option<usize> {
        self.spec.participants.iter().position(|p| p.id == id)
    }

    /// Label of the right-open 200 ms bin containing `time_ms`.
    pub fn label_at(&self, time_ms: u64, participant_id: u64) -> Result<bool> {
        let p = self
            .participant_index(participant_id)
            .ok_or_else(|| AsdError::input(format!("unknown participant {participant_id}")))?;
        let bin = (time_ms / LABEL_BIN_MS) as usize;
        if time_ms as f64 > self.spec.duration_s * 1000.0 || bin >= self.labels[p].len() {
            return Err(AsdError::input(format!("time {time_ms} ms outside meeting")));
        }
        Ok(self.labels[p][bin])
    }

    /// Label of a prediction tick: the bin containing the tick's end time.
    pub fn tick_label(&self, tick: usize, participant_index: usize) -> Option<bool> {
        let bin = (self.spec.tick_time_ms(tick) / LABEL_BIN_MS) as usize;
        self.labels[participant_index].get(bin).copied()
    }

    /// The `window` samples ending at the tick time (exclusive of later
    /// samples), zero-padded before the start of the meeting.
    pub fn audio_window(&self, tick: usize, window: usize) -> MultiChannelAudio {
        let end = ((self.spec.tick_time_s(tick) * self.spec.sample_rate as f64).round() as usize).min(self.audio.len());
        let channels = self
            .audio
            .channels
            .iter()
            .map(|ch| {
                let mut w = vec![0.0; window];
                let take = end.min(window);
                w[window - take..].copy_from_slice(&ch[end - take..end]);
                w
            })
            .collect();
        MultiChannelAudio { channels, sample_rate: self.audio.sample_rate }
    }

    pub fn frame(&self, frame: usize) -> FrameView<'_> {
        FrameView::new(self, frame)
    }
}
