use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::swap_offset;
use crate::error::{AsdError, Result};
use crate::eval::{compute_eer, ScoredPair};
use crate::query::Query;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, SgdNesterov};
use crate::visual::{transform_stack, PatchStack};

use super::{AsdModel, Batch, Dataset, LossValues};

/// Element type used for training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub precision: Precision,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Labelled ticks at the end of each training window.
    pub label_steps: usize,
    pub channel_swap_prob: f64,
    pub visual_augment_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            epochs: 40,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            patience: 10,
            label_steps: 16,
            channel_swap_prob: 0.5,
            visual_augment_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if self.epochs == 0 || self.batch_size == 0 || self.label_steps == 0 || !(self.learning_rate > 0.0) || !p(self.momentum) {
            return Err(AsdError::input("invalid training hyperparameters"));
        }
        if !p(self.channel_swap_prob) || !p(self.visual_augment_prob) {
            return Err(AsdError::input("augmentation probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_eer: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_eer,seconds\n");
        for e in &self.epochs {
            let eer = e.val_eer.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{:.3}\n", e.epoch, e.train_loss, eer, e.seconds));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_val_eer: Option<f64>,
    pub optimizer_steps: usize,
}

/// Owned storage behind a [`Batch`].
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    audio: Vec<Vec<f64>>,
    stacks: Vec<Vec<f64>>,
    queries: Vec<Query>,
    steps: Vec<Option<(usize, usize)>>,
    window: usize,
    labels: Vec<Option<usize>>,
}

impl TrainingBatch {
    pub fn view(&self) -> Batch<'_> {
        Batch {
            audio: self.audio.iter().map(Vec::as_slice).collect(),
            stacks: self.stacks.iter().map(Vec::as_slice).collect(),
            queries: self.queries.iter().collect(),
            steps: self.steps.clone(),
            batch: self.steps.len() / self.window,
            window: self.window,
            labels: self.labels.clone(),
        }
    }
}

/// Assemble training windows `(meeting, participant, end tick)` into a
/// batch, drawing one channel swap and one visual transform per window.
pub fn training_batch<T: Scalar, R: Rng>(
    model: &AsdModel<T>,
    data: &Dataset,
    windows: &[(usize, usize, usize)],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let fe = &model.frontend;
    let t = model.config.toggles;
    let window = model.receptive_field() - 1 + cfg.label_steps;
    let mut b = TrainingBatch {
        audio: Vec::new(),
        stacks: Vec::new(),
        queries: Vec::new(),
        steps: Vec::with_capacity(windows.len() * window),
        window,
        labels: Vec::with_capacity(windows.len() * cfg.label_steps),
    };
    for &(m, p, end) in windows {
        let md = &data.meetings[m];
        let pd = &md.participants[p];
        // one transform per window, shared by all of its steps
        let k = if (t.audio || t.query) && rng.gen_bool(cfg.channel_swap_prob) {
            rng.gen_range(1..fe.geometry.ring_count)
        } else {
            0
        };
        let offset = swap_offset(k, &fe.geometry);
        let visual_tf = (t.visual && rng.gen_bool(cfg.visual_augment_prob)).then(|| fe.patch_augment.sample(rng));
        for s in 0..window {
            let Some(tick) = (end + s + 1).checked_sub(window) else {
                b.steps.push(None);
                continue;
            };
            if t.visual {
                let mut stack = data.stack(m, p, tick);
                if let Some((angle, tx, ty)) = visual_tf {
                    let ps = PatchStack { depth: fe.stack_depth, height: fe.patch_height, width: fe.patch_width, data: stack };
                    stack = transform_stack(&ps, angle, tx, ty).data;
                }
                b.stacks.push(stack);
            } else {
                b.stacks.push(Vec::new());
            }
            b.queries.push(if k == 0 { pd.queries[tick].clone() } else { pd.queries[tick].rolled(offset) });
            if t.audio {
                let a = &md.audio[tick];
                b.audio.push(if k == 0 { a.clone() } else { model.swap_audio_input(a, k)? });
            }
            b.steps.push(Some((b.stacks.len() - 1, b.audio.len().saturating_sub(1))));
        }
        for s in window - cfg.label_steps..window {
            let label = (end + s + 1).checked_sub(window).and_then(|tick| pd.labels[tick]);
            b.labels.push(label.map(usize::from));
        }
    }
    Ok(b)
}

/// Score every (tick, participant) pair of a dataset with full-history
/// inference over ground-truth tracks.
pub fn evaluate_dataset<T: Scalar>(model: &AsdModel<T>, data: &Dataset) -> Result<Vec<ScoredPair>> {
    const CHUNK: usize = 16;
    let mut pairs = Vec::new();
    for (m, md) in data.meetings.iter().enumerate() {
        let np = md.participants.len();
        let mut seqs: Vec<Vec<Vec<T>>> = vec![Vec::with_capacity(md.ticks); np];
        for start in (0..md.ticks).step_by(CHUNK) {
            let ticks = start..(start + CHUNK).min(md.ticks);
            let audio: Vec<&[f64]> = if model.config.toggles.audio {
                md.audio[ticks.clone()].iter().map(Vec::as_slice).collect()
            } else {
                Vec::new()
            };
            let stacks: Vec<Vec<f64>> =
                ticks.clone().flat_map(|t| (0..np).map(move |p| (t, p))).map(|(t, p)| data.stack(m, p, t)).collect();
            let rows: Vec<(usize, &[f64], &Query)> = ticks
                .clone()
                .flat_map(|t| (0..np).map(move |p| (t, p)))
                .zip(&stacks)
                .map(|((t, p), s)| (t - start, s.as_slice(), &md.participants[p].queries[t]))
                .collect();
            for (i, e) in model.embed_batch(&audio, &rows)?.into_iter().enumerate() {
                seqs[i % np].push(e);
            }
        }
        for (pd, seq) in md.participants.iter().zip(&seqs) {
            for (tick, score) in model.predict_sequence(seq)?.into_iter().enumerate() {
                if let Some(label) = pd.labels[tick] {
                    pairs.push(ScoredPair { meeting: md.seed, tick, participant: pd.id, score, label });
                }
            }
        }
    }
    Ok(pairs)
}

/// Minibatch Nesterov SGD with early stopping on validation EER. The model
/// ends up holding the parameters of the best validation epoch.
pub fn train<T: Scalar>(
    model: &mut AsdModel<T>,
    train_data: &Dataset,
    val_data: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = SgdNesterov::new(T::of(cfg.learning_rate), T::of(cfg.momentum));
    let mut windows = train_data.windows(cfg.label_steps);
    if windows.is_empty() {
        return Err(AsdError::input("training set has no windows"));
    }
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        windows.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in windows.chunks(cfg.batch_size) {
            let owned = training_batch(model, train_data, chunk, cfg, &mut rng)?;
            let batch = owned.view();
            if batch.labels.iter().all(Option::is_none) {
                continue;
            }
            let (LossValues { total, .. }, grads) = model.loss_and_grads(&batch)?;
            opt.step(model.params_mut().tensors_mut(), &grads)?;
            steps += 1;
            loss_sum += total;
            batches += 1;
        }
        if model.params().tensors().iter().any(|t| !t.all_finite()) {
            return Err(AsdError::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let val_eer = match val_data {
            Some(v) => Some(compute_eer(&evaluate_dataset(model, v)?)?),
            None => None,
        };
        let record = EpochRecord { epoch, train_loss: loss_sum / batches.max(1) as f64, val_eer, seconds: started.elapsed().as_secs_f64() };
        progress(&record);
        history.epochs.push(record);
        let score = val_eer.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) || val_eer.is_none() {
            best = Some((score, epoch, model.params().clone()));
        } else if best.as_ref().is_some_and(|(_, e, _)| epoch - e >= cfg.patience) {
            break;
        }
    }
    let (score, best_epoch, params) = best.expect("at least one epoch");
    model.params_mut().load_from(&params)?;
    Ok(TrainOutcome { history, best_epoch, best_val_eer: score.is_finite().then_some(score), optimizer_steps: steps })
}
