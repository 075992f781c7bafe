//! Equal error rate, streaming evaluation with carry-forward scoring, the
//! frozen synthetic benchmark, ablations and the degradation sweep.

mod benchmark;
mod harness;

pub use benchmark::{BenchmarkSpec, BenchmarkSplits};
pub use harness::{
    degradation_sweep, run_ablation, run_streaming, score_streaming, sweep_rates, AblationRow, AblationRun, BenchmarkRecords, SweepPoint,
};

use serde::Serialize;

use crate::error::{AsdError, Result};

/// One scored (tick, participant) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoredPair {
    /// Seed of the meeting the pair belongs to.
    pub meeting: u64,
    pub tick: usize,
    pub participant: u64,
    pub score: f64,
    pub label: bool,
}

/// A point of the detection error trade-off for "speaking iff score >= threshold".
fn error_rates(fp: usize, fneg: usize, neg: usize, pos: usize) -> (f64, f64) {
    (fp as f64 / neg as f64, fneg as f64 / pos as f64)
}

/// Where the segment between two (FPR, FNR) points crosses FPR = FNR.
fn crossing(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (d0, d1) = (a.1 - a.0, b.1 - b.0);
    if d0 == d1 {
        return a.0;
    }
    let alpha = d0 / (d0 - d1);
    a.0 + alpha * (b.0 - a.0)
}

/// Equal error rate in percent. Thresholds sweep from +∞ down through every
/// distinct score; the rate is interpolated linearly on the segment where
/// the false-negative rate falls to the false-positive rate.
pub fn compute_eer(pairs: &[ScoredPair]) -> Result<f64> {
    let pos = pairs.iter().filter(|p| p.label).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(AsdError::UndefinedMetric(format!("EER needs both classes ({pos} positive, {neg} negative)")));
    }
    if pairs.iter().any(|p| !p.score.is_finite()) {
        return Err(AsdError::NonFinite("score".into()));
    }
    let mut sorted: Vec<(f64, bool)> = pairs.iter().map(|p| (p.score, p.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut prev = error_rates(0, pos, neg, pos);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let cur = error_rates(fp, pos - tp, neg, pos);
        if cur.1 <= cur.0 {
            return Ok(100.0 * crossing(prev, cur));
        }
        prev = cur;
    }
    unreachable!("the last threshold has FNR 0 <= FPR")
}

/// Score streaming output per (tick, participant) with carry-forward.
///
/// `latest[tick]` maps each ground-truth participant to the most recent
/// probability its tracklet produced up to that tick; participants without
/// any prediction yet score 0.5.
pub fn carry_forward_pairs(
    meeting: u64,
    participants: &[u64],
    latest: &[std::collections::BTreeMap<u64, f64>],
    label: impl Fn(usize, usize) -> Option<bool>,
) -> Vec<ScoredPair> {
    let mut out = Vec::new();
    for (tick, scores) in latest.iter().enumerate() {
        for (i, &id) in participants.iter().enumerate() {
            if let Some(l) = label(tick, i) {
                out.push(ScoredPair { meeting, tick, participant: id, score: scores.get(&id).copied().unwrap_or(0.5), label: l });
            }
        }
    }
    out
}
