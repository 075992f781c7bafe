use std::collections::{BTreeMap, VecDeque};

use crate::audio::{MultiChannelAudio, Stft};
use crate::error::Result;
use crate::query::{build_query, Query};
use crate::scalar::Scalar;
use crate::visual::{adjust_bbox, extract_patch, stack_patches, FacePatch, Raster};
use crate::model::AsdModel;

use super::{Detection, EmbeddingQueue, Scheduler, StreamingConfig, TrackletManager};

/// Everything observed at one tick.
pub struct TickInput<'a> {
    pub frame: &'a dyn Raster,
    /// Audio window ending at the tick time.
    pub audio: &'a MultiChannelAudio,
    pub detections: &'a [Detection],
    pub budget_kflops: u64,
}

/// One line of the prediction log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRow {
    pub tick: u64,
    pub time_ms: u64,
    pub tracklet_id: u64,
    pub truth_id: Option<u64>,
    /// Latest probability; `None` until the tracklet is first predicted.
    pub probability: Option<f64>,
    pub predicted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TickOutput {
    pub tick: u64,
    pub rows: Vec<PredictionRow>,
    pub spent_kflops: u64,
}

/// Model inputs of one prediction, kept when tracing is on.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub tick: u64,
    pub tracklet_id: u64,
    pub audio: Vec<f64>,
    pub stack: Vec<f64>,
    pub query: Query,
}

struct TrackState<T> {
    queue: EmbeddingQueue<T>,
    patches: VecDeque<FacePatch>,
    probability: Option<f64>,
}

/// Tick-by-tick inference over a stream of frames, audio and detections.
pub struct StreamingPipeline<T> {
    model: AsdModel<T>,
    stft: Stft,
    tracker: TrackletManager,
    scheduler: Scheduler,
    states: BTreeMap<u64, TrackState<T>>,
    tick: u64,
    trace: Option<Vec<TraceStep>>,
}

impl<T: Scalar> StreamingPipeline<T> {
    pub fn new(model: AsdModel<T>, config: &StreamingConfig) -> Result<Self> {
        config.validate()?;
        let fe = model.frontend.clone();
        Ok(Self {
            stft: Stft::new(fe.stft)?,
            tracker: TrackletManager::new(config.tracker, fe.panorama, fe.tick_rate),
            scheduler: Scheduler::new(config.budget.cost_model()),
            states: BTreeMap::new(),
            tick: 0,
            trace: None,
            model,
        })
    }

    /// Keep the model inputs of every prediction.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> Option<&[TraceStep]> {
        self.trace.as_deref()
    }

    pub fn model(&self) -> &AsdModel<T> {
        &self.model
    }

    pub fn tracker(&self) -> &TrackletManager {
        &self.tracker
    }

    pub fn queue_len(&self, tracklet_id: u64) -> Option<usize> {
        self.states.get(&tracklet_id).map(|s| s.queue.len())
    }

    pub fn time_ms(&self, tick: u64) -> u64 {
        (tick as f64 * 1000.0 / self.model.frontend.tick_rate + 1e-9).floor() as u64
    }

    pub fn process(&mut self, input: &TickInput) -> Result<TickOutput> {
        let tick = self.tick;
        let fe = self.model.frontend.clone();
        let toggles = self.model.config.toggles;
        let tracklets = self.tracker.step(input.detections).to_vec();

        self.states.retain(|id, _| tracklets.iter().any(|t| t.id == *id));
        let r = self.model.receptive_field();
        for t in &tracklets {
            let state = self.states.entry(t.id).or_insert_with(|| TrackState {
                queue: EmbeddingQueue::new(r),
                patches: VecDeque::with_capacity(fe.stack_depth + 1),
                probability: None,
            });
            if toggles.visual {
                let b = adjust_bbox(&t.bbox, &fe.box_adjust, &fe.panorama);
                state.patches.push_back(extract_patch(input.frame, &b, fe.patch_height, fe.patch_width)?);
                if state.patches.len() > fe.stack_depth {
                    state.patches.pop_front();
                }
            }
        }

        let ids: Vec<u64> = tracklets.iter().map(|t| t.id).collect();
        let schedule = self.scheduler.schedule_tick(tick, &ids, input.budget_kflops);
        if !schedule.selected.is_empty() {
            let audio = if toggles.audio { Some(self.model.audio_input(input.audio, &self.stft)?) } else { None };
            let positions: Vec<(u64, _)> = tracklets
                .iter()
                .map(|t| Ok((t.id, fe.panorama.box_to_spherical(&t.bbox)?)))
                .collect::<Result<_>>()?;
            let mut stacks = Vec::with_capacity(schedule.selected.len());
            let mut queries = Vec::with_capacity(schedule.selected.len());
            for id in &schedule.selected {
                let state = &self.states[id];
                stacks.push(if toggles.visual {
                    let history: Vec<FacePatch> = state.patches.iter().cloned().collect();
                    stack_patches(&history, fe.stack_depth)?.data
                } else {
                    Vec::new()
                });
                let (_, me) = positions.iter().find(|(p, _)| p == id).expect("selected tracklet is active");
                let others: Vec<_> = positions.iter().filter(|(p, _)| p != id).cloned().collect();
                queries.push(build_query(me, &others, self.model.config.max_background));
            }
            let rows: Vec<(&[f64], &Query)> = stacks.iter().map(Vec::as_slice).zip(&queries).collect();
            let embeddings = self.model.embed(audio.as_deref(), &rows)?;
            for (id, e) in schedule.selected.iter().zip(embeddings) {
                let state = self.states.get_mut(id).expect("selected tracklet has state");
                state.queue.push(e);
                state.queue.last_prediction_tick = Some(tick);
            }
            let windows: Vec<Vec<&[T]>> = schedule.selected.iter().map(|id| self.states[id].queue.window()).collect();
            let probs = self.model.predict_windows(&windows)?;
            for (id, p) in schedule.selected.iter().zip(probs) {
                self.states.get_mut(id).expect("selected tracklet has state").probability = Some(p);
            }
            if let Some(trace) = &mut self.trace {
                for ((id, stack), query) in schedule.selected.iter().zip(stacks).zip(queries) {
                    trace.push(TraceStep { tick, tracklet_id: *id, audio: audio.clone().unwrap_or_default(), stack, query });
                }
            }
        }

        let time_ms = self.time_ms(tick);
        let rows = tracklets
            .iter()
            .map(|t| PredictionRow {
                tick,
                time_ms,
                tracklet_id: t.id,
                truth_id: t.truth_id,
                probability: self.states[&t.id].probability,
                predicted: schedule.selected.contains(&t.id),
            })
            .collect();
        self.tick += 1;
        Ok(TickOutput { tick, rows, spent_kflops: schedule.spent_kflops })
    }
}

/// Prediction log as CSV.
pub fn rows_to_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("tick,time_ms,tracklet_id,probability,predicted\n");
    for r in rows {
        let p = r.probability.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.tick, r.time_ms, r.tracklet_id, p, u8::from(r.predicted)));
    }
    out
}
