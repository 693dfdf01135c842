// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Watermark reclaim policy.
//!
//! Reclaim starts once free memory drops below `low` and stops once it
//! reaches `high`. Between the two the state is sticky. `min` is enforced
//! separately on the fault path by [`super::SwapEngine::emergency_reclaim`].

use crate::events::ReclaimState;
use crate::mem_model::MemCounters;

use super::SwapError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Watermarks {
    pub min: u64,
    pub low: u64,
    pub high: u64,
}

impl Watermarks {
    /// Fractions of the physical section count, rounded down.
    pub fn from_fractions(phys_ms: u64, min: f64, low: f64, high: f64) -> Self {
        let at = |f: f64| (phys_ms as f64 * f).floor() as u64;
        Self {
            min: at(min),
            low: at(low),
            high: at(high),
        }
    }

    /// 2% / 6% / 12% of physical sections.
    pub fn default_for(phys_ms: u64) -> Self {
        Self::from_fractions(phys_ms, 0.02, 0.06, 0.12)
    }

    pub fn validate(&self, phys_ms: u64) -> Result<(), SwapError> {
        if self.min < self.low && self.low < self.high && self.high < phys_ms {
            Ok(())
        } else {
            Err(SwapError::Config(format!(
                "watermarks must satisfy min < low < high < {phys_ms}: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReclaimDecision {
    pub state: ReclaimState,
    pub target_ms: u64,
    /// Set when this tick changed the state.
    pub transition: Option<(ReclaimState, ReclaimState)>,
}

#[derive(Debug, Clone)]
pub struct WatermarkPolicy {
    wm: Watermarks,
    state: ReclaimState,
    /// Start reclaiming below `high` instead of `low`.
    pub early_reclaim: bool,
    /// Emit a zero target between `low` and `high` when no cold sections
    /// are available.
    pub halt_without_cold: bool,
}

impl WatermarkPolicy {
    pub fn new(wm: Watermarks) -> Self {
        Self {
            wm,
            state: ReclaimState::Idle,
            early_reclaim: false,
            halt_without_cold: true,
        }
    }

    pub fn watermarks(&self) -> Watermarks {
        self.wm
    }

    pub fn state(&self) -> ReclaimState {
        self.state
    }

    pub fn tick(&mut self, counters: &MemCounters, cold_supply: usize) -> ReclaimDecision {
        let free = counters.free_ms;
        let start_below = if self.early_reclaim {
            self.wm.high
        } else {
            self.wm.low
        };
        let from = self.state;
        self.state = match self.state {
            ReclaimState::Idle if free < start_below => ReclaimState::Reclaiming,
            ReclaimState::Reclaiming if free >= self.wm.high => ReclaimState::Idle,
            s => s,
        };
        let mut target = match self.state {
            ReclaimState::Idle => 0,
            ReclaimState::Reclaiming => self.wm.high - free.min(self.wm.high),
        };
        if self.halt_without_cold && cold_supply == 0 && free >= self.wm.low {
            target = 0;
        }
        ReclaimDecision {
            state: self.state,
            target_ms: target,
            transition: (from != self.state).then_some((from, self.state)),
        }
    }
}
