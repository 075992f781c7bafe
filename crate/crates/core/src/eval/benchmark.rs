use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AsdError, Result};
use crate::sim::{MeetingSpec, ParticipantSpec};

/// Definition of the synthetic benchmark. Meeting specs are a pure function
/// of these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub train_meetings: usize,
    pub val_meetings: usize,
    pub test_meetings: usize,
    pub min_participants: usize,
    pub max_participants: usize,
    pub min_separation_deg: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub min_distance_m: f64,
    pub max_distance_m: f64,
    pub max_altitude_deg: f64,
    pub snr_db: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 2024,
            train_meetings: 20,
            val_meetings: 5,
            test_meetings: 5,
            min_participants: 6,
            max_participants: 10,
            min_separation_deg: 30.0,
            min_duration_s: 30.0,
            max_duration_s: 40.0,
            min_distance_m: 0.8,
            max_distance_m: 2.0,
            max_altitude_deg: 8.0,
            snr_db: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSplits {
    pub train: Vec<MeetingSpec>,
    pub val: Vec<MeetingSpec>,
    pub test: Vec<MeetingSpec>,
}

impl BenchmarkSplits {
    /// SHA-256 over the canonical JSON of all meeting specs.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            h.update(name.as_bytes());
            for s in split {
                h.update(serde_json::to_vec(s).expect("spec serializes"));
            }
        }
        hex::encode(h.finalize())
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AsdError::input(m.to_string()));
        if self.train_meetings == 0 || self.test_meetings == 0 {
            return bad("benchmark needs train and test meetings");
        }
        if self.min_participants == 0 || self.min_participants > self.max_participants || self.max_participants > 14 {
            return bad("participant range must lie within 1..=14");
        }
        if self.max_participants as f64 * self.min_separation_deg > 360.0 {
            return bad("participants do not fit at the requested separation");
        }
        if !(self.min_duration_s > 0.0 && self.min_duration_s <= self.max_duration_s) {
            return bad("invalid duration range");
        }
        if !(0.5 <= self.min_distance_m && self.min_distance_m <= self.max_distance_m && self.max_distance_m <= 3.0) {
            return bad("distances must lie within [0.5, 3] m");
        }
        if !(0.0..=20.0).contains(&self.max_altitude_deg) {
            return bad("altitude range must lie within 20 degrees");
        }
        Ok(())
    }

    /// One benchmark-style meeting drawn from `seed`.
    pub fn meeting(&self, seed: u64) -> MeetingSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(self.min_participants..=self.max_participants);
        let duration = if self.max_duration_s > self.min_duration_s {
            rng.gen_range(self.min_duration_s..self.max_duration_s)
        } else {
            self.min_duration_s
        };
        // gaps are the minimum separation plus a random share of the slack
        let sep = self.min_separation_deg.to_radians();
        let slack = std::f64::consts::TAU - k as f64 * sep;
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
        let participants = weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let p = ParticipantSpec {
                    id: i as u64 + 1,
                    azimuth: crate::geometry::wrap_angle(azimuth),
                    altitude: rng.gen_range(-self.max_altitude_deg..=self.max_altitude_deg).to_radians(),
                    distance: rng.gen_range(self.min_distance_m..=self.max_distance_m),
                    head_width: rng.gen_range(0.14..0.18),
                    activity: Default::default(),
                };
                azimuth += sep + slack * w / total;
                p
            })
            .collect();
        let mut spec = MeetingSpec::new(seed, (duration * 10.0).round() / 10.0, participants);
        spec.snr_db = Some(self.snr_db);
        spec
    }

    pub fn splits(&self) -> Result<BenchmarkSplits> {
        self.validate()?;
        let seeds = |offset: u64, n: usize| -> Vec<MeetingSpec> {
            (0..n as u64).map(|i| self.meeting(self.seed.wrapping_mul(1_000_003).wrapping_add(offset + i))).collect()
        };
        let s = BenchmarkSplits {
            train: seeds(0, self.train_meetings),
            val: seeds(10_000, self.val_meetings),
            test: seeds(20_000, self.test_meetings),
        };
        for m in s.train.iter().chain(&s.val).chain(&s.test) {
            m.validate()?;
        }
        Ok(s)
    }
}
