use std::collections::BTreeMap;
use std::time::Instant;

use num_rational::Ratio;
use serde::Serialize;

use crate::config::Config;
use crate::error::Result;
use crate::model::{evaluate_dataset, train, AsdModel, Dataset, EpochRecord, Toggles};
use crate::scalar::Scalar;
use crate::sim::MeetingRecord;
use crate::streaming::{CreditBudget, Detection, StreamingConfig, StreamingPipeline, TickInput, TickOutput};

use super::{carry_forward_pairs, compute_eer, BenchmarkSplits, ScoredPair};

/// Streaming inference over a whole meeting, with detections taken from the
/// simulated head tracks and a per-tick budget from `budget(tick)`.
pub fn run_streaming<T: Scalar>(
    model: &AsdModel<T>,
    record: &MeetingRecord,
    config: &StreamingConfig,
    mut budget: impl FnMut(u64) -> u64,
) -> Result<Vec<TickOutput>> {
    let mut pipeline = StreamingPipeline::new(model.clone(), config)?;
    let window = model.frontend.audio_samples();
    let mut out = Vec::with_capacity(record.tracks.len());
    for (tick, row) in record.tracks.iter().enumerate() {
        let detections: Vec<Detection> =
            row.iter().map(|tp| Detection { bbox: tp.bbox, truth_id: Some(tp.participant_id) }).collect();
        let frame = record.frame(tick);
        let audio = record.audio_window(tick, window);
        out.push(pipeline.process(&TickInput {
            frame: &frame,
            audio: &audio,
            detections: &detections,
            budget_kflops: budget(tick as u64),
        })?);
    }
    Ok(out)
}

/// Carry-forward scoring of streaming output against the meeting labels.
pub fn score_streaming(record: &MeetingRecord, outputs: &[TickOutput]) -> Vec<ScoredPair> {
    let mut current: BTreeMap<u64, f64> = BTreeMap::new();
    let latest: Vec<BTreeMap<u64, f64>> = outputs
        .iter()
        .map(|o| {
            for r in &o.rows {
                if let (Some(id), Some(p)) = (r.truth_id, r.probability) {
                    current.insert(id, p);
                }
            }
            current.clone()
        })
        .collect();
    let ids: Vec<u64> = record.spec.participants.iter().map(|p| p.id).collect();
    carry_forward_pairs(record.spec.seed, &ids, &latest, |t, i| record.tick_label(t, i))
}

/// Prediction rates of the sweep grid: 7.5 down to 1.875 in steps of 0.375.
pub fn sweep_rates() -> Vec<Ratio<u64>> {
    (0..=15u64).map(|i| Ratio::new(60 - 3 * i, 8)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub eer: f64,
    /// Measured predictions per participant per second.
    pub achieved_rate: f64,
    pub max_tick_kflops: u64,
}

fn rate_ratio(x: f64) -> Ratio<u64> {
    Ratio::new((x * 1000.0).round() as u64, 1000)
}

/// EER as the average prediction rate per participant is lowered.
pub fn degradation_sweep<T: Scalar>(
    model: &AsdModel<T>,
    records: &[MeetingRecord],
    config: &StreamingConfig,
    rates: &[Ratio<u64>],
) -> Result<Vec<SweepPoint>> {
    let cost = config.budget.cost_model();
    let tick_rate = rate_ratio(model.frontend.tick_rate);
    let mut out = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut pairs = Vec::new();
        let (mut predictions, mut participant_seconds, mut max_spent) = (0usize, 0.0, 0u64);
        for rec in records {
            let k = rec.spec.participants.len() as u64;
            let mut credit = CreditBudget::for_rate(k, rate, tick_rate);
            let outputs = run_streaming(model, rec, config, |_| cost.budget_for(credit.next_capacity()))?;
            predictions += outputs.iter().flat_map(|o| &o.rows).filter(|r| r.predicted).count();
            max_spent = max_spent.max(outputs.iter().map(|o| o.spent_kflops).max().unwrap_or(0));
            participant_seconds += k as f64 * outputs.len() as f64 / model.frontend.tick_rate;
            pairs.extend(score_streaming(rec, &outputs));
        }
        out.push(SweepPoint {
            rate: *rate.numer() as f64 / *rate.denom() as f64,
            eer: compute_eer(&pairs)?,
            achieved_rate: predictions as f64 / participant_seconds,
            max_tick_kflops: max_spent,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub test_eer: f64,
    pub val_eer: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_seconds: f64,
    pub split_hash: String,
}

/// Generated meetings of every split.
pub struct BenchmarkRecords {
    pub splits: BenchmarkSplits,
    pub train: Vec<MeetingRecord>,
    pub val: Vec<MeetingRecord>,
    pub test: Vec<MeetingRecord>,
}

impl BenchmarkRecords {
    pub fn generate(splits: BenchmarkSplits) -> Result<Self> {
        let gen = |v: &[crate::sim::MeetingSpec]| v.iter().map(crate::sim::generate).collect::<Result<Vec<_>>>();
        Ok(Self { train: gen(&splits.train)?, val: gen(&splits.val)?, test: gen(&splits.test)?, splits })
    }
}

/// A trained ablation preset and its scores.
#[derive(Clone)]
pub struct AblationRun<T: Scalar> {
    pub row: AblationRow,
    pub model: AsdModel<T>,
}

/// Train and test every preset on the same splits with the same seed.
pub fn run_ablation<T: Scalar>(
    config: &Config,
    data: &BenchmarkRecords,
    presets: &[&str],
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<AblationRun<T>>> {
    let hash = data.splits.hash();
    let mut superset = config.model.clone();
    superset.toggles = Toggles::default();
    let builder: AsdModel<T> = AsdModel::new(&config.frontend, &superset, config.seed)?;
    let train_set = Dataset::build(&data.train, &builder)?;
    let val_set = Dataset::build(&data.val, &builder)?;
    let test_set = Dataset::build(&data.test, &builder)?;
    let mut rows = Vec::with_capacity(presets.len());
    for name in presets {
        let mut mc = config.model.clone();
        mc.toggles = Toggles::preset(name)?;
        let mut model: AsdModel<T> = AsdModel::new(&config.frontend, &mc, config.seed)?;
        let started = Instant::now();
        let outcome = train(&mut model, &train_set, Some(&val_set), &config.train, config.seed, |e| progress(name, e))?;
        let train_seconds = started.elapsed().as_secs_f64();
        let test_eer = compute_eer(&evaluate_dataset(&model, &test_set)?)?;
        let row = AblationRow {
            name: name.to_ascii_uppercase(),
            toggles: mc.toggles,
            test_eer,
            val_eer: outcome.best_val_eer,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.epochs.len(),
            train_seconds,
            split_hash: hash.clone(),
        };
        rows.push(AblationRun { row, model });
    }
    Ok(rows)
}
