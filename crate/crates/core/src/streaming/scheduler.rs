use std::collections::BTreeMap;

use num_rational::Ratio;

use crate::error::{AsdError, Result};

/// Inference cost in kFLOPs: the audio encoder once per tick plus a fixed
/// amount per predicted participant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub audio_kflops: u64,
    pub participant_kflops: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { audio_kflops: 43_500, participant_kflops: 123_500 }
    }
}

impl CostModel {
    /// Cost of one tick predicting `k` participants.
    pub fn tick_cost(&self, k: u64) -> u64 {
        if k == 0 {
            0
        } else {
            self.audio_kflops + k * self.participant_kflops
        }
    }

    /// Smallest budget that admits `k` participants per tick.
    pub fn budget_for(&self, k: u64) -> u64 {
        self.tick_cost(k)
    }

    /// Participants a budget admits.
    pub fn capacity(&self, budget_kflops: u64) -> u64 {
        budget_kflops.checked_sub(self.audio_kflops).map_or(0, |rest| rest / self.participant_kflops)
    }

    /// Exact MFLOPs per participant when `k` participants share the audio encoder.
    pub fn per_participant_mflops(&self, k: u64) -> Result<Ratio<u64>> {
        if k == 0 {
            return Err(AsdError::input("participant count must be at least 1"));
        }
        Ok(Ratio::new(self.tick_cost(k), 1000 * k))
    }
}

/// Per-participant MFLOPs of the reference cost model for `k` participants.
pub fn cost_model(k: u64) -> Result<Ratio<u64>> {
    CostModel::default().per_participant_mflops(k)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TickSchedule {
    pub selected: Vec<u64>,
    pub spent_kflops: u64,
}

/// Round-robin selection of the participants predicted longest ago.
#[derive(Clone, Debug)]
pub struct Scheduler {
    cost: CostModel,
    last: BTreeMap<u64, Option<u64>>,
}

impl Scheduler {
    pub fn new(cost: CostModel) -> Self {
        Self { cost, last: BTreeMap::new() }
    }

    pub fn cost_model(&self) -> CostModel {
        self.cost
    }

    pub fn last_prediction_tick(&self, id: u64) -> Option<u64> {
        self.last.get(&id).copied().flatten()
    }

    /// Choose this tick's participants among `active`. Never-predicted
    /// participants come first, then ascending last prediction tick; ties go
    /// to the lower id. Participants missing from `active` are forgotten.
    pub fn schedule_tick(&mut self, tick: u64, active: &[u64], budget_kflops: u64) -> TickSchedule {
        self.last.retain(|id, _| active.contains(id));
        for &id in active {
            self.last.entry(id).or_insert(None);
        }
        let mut order: Vec<(Option<u64>, u64)> = self.last.iter().map(|(&id, &t)| (t, id)).collect();
        // None sorts before Some
        order.sort_unstable();
        let mut selected = Vec::new();
        for (_, id) in order {
            if self.cost.tick_cost(selected.len() as u64 + 1) > budget_kflops {
                break;
            }
            selected.push(id);
        }
        for id in &selected {
            self.last.insert(*id, Some(tick));
        }
        TickSchedule { spent_kflops: self.cost.tick_cost(selected.len() as u64), selected }
    }
}

/// Spreads a fractional per-tick capacity over ticks with exact credit
/// accumulation: tick `t` admits `floor((t + 1) c) - floor(t c)` participants.
#[derive(Clone, Debug)]
pub struct CreditBudget {
    per_tick: Ratio<u64>,
    credit: Ratio<u64>,
}

impl CreditBudget {
    pub fn new(per_tick: Ratio<u64>) -> Self {
        Self { per_tick, credit: Ratio::from_integer(0) }
    }

    /// Capacity giving an average prediction rate of `rate / tick_rate` per
    /// participant for `k` participants.
    pub fn for_rate(k: u64, rate: Ratio<u64>, tick_rate: Ratio<u64>) -> Self {
        Self::new(Ratio::from_integer(k) * rate / tick_rate)
    }

    pub fn next_capacity(&mut self) -> u64 {
        let before = self.credit.to_integer();
        self.credit += self.per_tick;
        self.credit.to_integer() - before
    }
}
