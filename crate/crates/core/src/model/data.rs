use crate::audio::Stft;
use crate::error::Result;
use crate::query::{build_query, Query};
use crate::scalar::Scalar;
use crate::sim::MeetingRecord;
use crate::visual::{adjust_bbox, extract_patch};

use super::AsdModel;

/// Precomputed per-tick inputs of one participant under ground-truth tracks.
#[derive(Clone, Debug)]
pub struct ParticipantData {
    pub id: u64,
    /// `ticks * height * width` luminance values; empty without the visual pathway.
    pub patches: Vec<f32>,
    pub queries: Vec<Query>,
    pub labels: Vec<Option<bool>>,
}

#[derive(Clone, Debug)]
pub struct MeetingData {
    pub seed: u64,
    pub ticks: usize,
    /// Full audio input per tick; empty without the audio pathway.
    pub audio: Vec<Vec<f64>>,
    pub participants: Vec<ParticipantData>,
}

/// Model inputs for a set of meetings.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meetings: Vec<MeetingData>,
    pub depth: usize,
    pub patch_len: usize,
}

impl Dataset {
    pub fn build<T: Scalar>(records: &[MeetingRecord], model: &AsdModel<T>) -> Result<Self> {
        let fe = &model.frontend;
        let t = model.config.toggles;
        let stft = Stft::new(fe.stft)?;
        let window = fe.audio_samples();
        let mut meetings = Vec::with_capacity(records.len());
        for rec in records {
            let ticks = rec.tracks.len();
            let audio = if t.audio {
                (0..ticks).map(|k| model.audio_input(&rec.audio_window(k, window), &stft)).collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let mut participants: Vec<ParticipantData> = rec
                .spec
                .participants
                .iter()
                .map(|p| ParticipantData {
                    id: p.id,
                    patches: Vec::new(),
                    queries: Vec::with_capacity(ticks),
                    labels: Vec::with_capacity(ticks),
                })
                .collect();
            for (tick, row) in rec.tracks.iter().enumerate() {
                let frame = t.visual.then(|| rec.frame(tick));
                for (i, pd) in participants.iter_mut().enumerate() {
                    let tp = &row[i];
                    if let Some(frame) = &frame {
                        let b = adjust_bbox(&tp.bbox, &fe.box_adjust, &fe.panorama);
                        let patch = extract_patch(frame, &b, fe.patch_height, fe.patch_width)?;
                        pd.patches.extend(patch.pixels.iter().map(|&x| x as f32));
                    }
                    let others: Vec<_> = row
                        .iter()
                        .filter(|o| o.participant_id != tp.participant_id)
                        .map(|o| (o.participant_id, o.position()))
                        .collect();
                    pd.queries.push(build_query(&tp.position(), &others, model.config.max_background));
                    pd.labels.push(rec.tick_label(tick, i));
                }
            }
            meetings.push(MeetingData { seed: rec.spec.seed, ticks, audio, participants });
        }
        Ok(Self { meetings, depth: fe.stack_depth, patch_len: fe.patch_height * fe.patch_width })
    }

    /// Patch stack of participant `p` at `tick`, oldest first; ticks before
    /// the start repeat the first patch.
    pub fn stack(&self, meeting: usize, p: usize, tick: usize) -> Vec<f64> {
        let patches = &self.meetings[meeting].participants[p].patches;
        if patches.is_empty() {
            return Vec::new();
        }
        let n = self.patch_len;
        let mut out = Vec::with_capacity(self.depth * n);
        for layer in 0..self.depth {
            let src = (tick + layer + 1).saturating_sub(self.depth);
            out.extend(patches[src * n..(src + 1) * n].iter().map(|&x| x as f64));
        }
        out
    }

    /// Training windows `(meeting, participant, last tick)` whose labelled
    /// tails of `labelled` ticks cover every tick once.
    pub fn windows(&self, labelled: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (m, md) in self.meetings.iter().enumerate() {
            let mut ends: Vec<usize> = (labelled - 1..md.ticks).step_by(labelled).collect();
            if md.ticks > 0 && ends.last() != Some(&(md.ticks - 1)) {
                ends.push(md.ticks - 1);
            }
            for p in 0..md.participants.len() {
                out.extend(ends.iter().map(|&e| (m, p, e)));
            }
        }
        out
    }

    pub fn num_labels(&self) -> usize {
        self.meetings.iter().flat_map(|m| &m.participants).map(|p| p.labels.iter().flatten().count()).sum()
    }
}
