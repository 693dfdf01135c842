// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Trace-driven simulator around the elasmem engine.

pub mod config;
pub mod corpus;
pub mod report;
pub mod sim;
pub mod trace;

use elasmem_core::hot_upgrade::UpgradeError;
use elasmem_core::scheduler::SchedError;
use elasmem_core::EngineError;
use thiserror::Error;

pub use config::SimConfig;
pub use report::MetricsReport;
pub use sim::{run, RunOptions, RunOutcome};
pub use trace::{gen_trace, Trace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("report format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Upgrade(#[from] UpgradeError),
}

impl From<elasmem_core::mem_model::MemError> for SimError {
    fn from(e: elasmem_core::mem_model::MemError) -> Self {
        SimError::Engine(e.into())
    }
}
