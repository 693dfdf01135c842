// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Memory elasticity engine.
//!
//! Guest memory is tracked and reclaimed at memory-section (MS, huge page)
//! granularity while faults and transfers operate on memory pages (MP,
//! small pages). The crate is split into:
//!
//! * [`mem_model`]: the simulated guest-physical space, the two-granularity
//!   mapping table and the pinned metadata pool.
//! * [`lru`]: multi-level hot/cold sets that supply cold MS candidates.
//! * [`swap`]: the parallel swap engine and the watermark policy.
//! * [`backend`]: zero-page and compressed in-memory swap storage.
//! * [`scheduler`]: per-PCPU priority time-slice scheduling.
//! * [`dma_guard`]: DMA range registration and DMAR recovery.
//! * [`hot_upgrade`]: dispatch-table based live upgrade.
//! * [`engine`]: wires the pieces into one guest access path.

pub mod backend;
pub mod bitmap;
pub mod dma_guard;
pub mod engine;
pub mod events;
pub mod hot_upgrade;
pub mod lru;
pub mod mem_model;
pub mod scheduler;
pub mod swap;

pub use engine::{AccessOutcome, Engine, EngineConfig, EngineError, EngineSnapshot};
pub use mem_model::{Geometry, Gfn, Pfn};
