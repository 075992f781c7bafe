//! Real-time inference: tracklets, per-tracklet embedding queues and the
//! budgeted round-robin scheduler.

mod pipeline;
mod queue;
mod scheduler;
mod tracker;

pub use pipeline::{rows_to_csv, PredictionRow, StreamingPipeline, TickInput, TickOutput, TraceStep};
pub use queue::EmbeddingQueue;
pub use scheduler::{cost_model, CostModel, CreditBudget, Scheduler, TickSchedule};
pub use tracker::{Detection, Tracklet, TrackletManager};

use serde::{Deserialize, Serialize};

use crate::error::{AsdError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub iou_threshold: f64,
    pub retire_after_s: f64,
    pub motion_threshold_px: f64,
    pub stripes: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.3, retire_after_s: 2.0, motion_threshold_px: 2.0, stripes: 4 }
    }
}

/// Per-tick compute budget in kFLOPs, with the cost model used to spend it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub audio_kflops: u64,
    pub participant_kflops: u64,
    pub tick_budget_kflops: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        let cost = CostModel::default();
        Self {
            audio_kflops: cost.audio_kflops,
            participant_kflops: cost.participant_kflops,
            tick_budget_kflops: cost.budget_for(14),
        }
    }
}

impl BudgetConfig {
    pub fn cost_model(&self) -> CostModel {
        CostModel { audio_kflops: self.audio_kflops, participant_kflops: self.participant_kflops }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamingConfig {
    pub tracker: TrackerConfig,
    pub budget: BudgetConfig,
}

impl StreamingConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.tracker;
        if !(t.iou_threshold > 0.0 && t.iou_threshold <= 1.0) || t.stripes == 0 || !(t.retire_after_s >= 0.0) || !(t.motion_threshold_px >= 0.0) {
            return Err(AsdError::input("invalid tracker configuration"));
        }
        if self.budget.participant_kflops == 0 {
            return Err(AsdError::input("participant cost must be positive"));
        }
        Ok(())
    }
}
