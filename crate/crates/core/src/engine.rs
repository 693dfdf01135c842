// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! One guest memory access path over all the components.

use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::backend::{Backend, BackendStats};
use crate::dma_guard::{DmaAccess, DmaError, DmaGuard, DmaRanges, DmaStats};
use crate::events::{EventKind, EventLog, ReclaimState};
use crate::lru::{Lru, LruConfig, LruError, ScanReport};
use crate::mem_model::{
    AddressSpace, Geometry, Gfn, MemCounters, MemError, MpoolReport, Translation,
};
use crate::swap::{
    FaultResult, ReclaimDecision, ReclaimOutcome, SwapEngine, SwapError, SwapStats,
    WatermarkPolicy, Watermarks,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error(transparent)]
    Lru(#[from] LruError),
    #[error(transparent)]
    Dma(#[from] DmaError),
}

impl EngineError {
    pub fn is_oom(&self) -> bool {
        matches!(
            self,
            EngineError::Swap(SwapError::OutOfMemory) | EngineError::Mem(MemError::OutOfMemory)
        )
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub geometry: Geometry,
    /// Defaults to 1.2% of physical memory.
    pub mpool_reservation: Option<u64>,
    pub lru: LruConfig,
    /// Defaults to 2% / 6% / 12% of physical sections.
    pub watermarks: Option<Watermarks>,
    pub early_reclaim: bool,
    pub halt_without_cold: bool,
    /// Backend payload limit in bytes.
    pub backend_capacity: Option<u64>,
    pub record_events: bool,
}

impl EngineConfig {
    pub fn new(geometry: Geometry) -> Self {
        Self {
            geometry,
            mpool_reservation: None,
            lru: LruConfig::default(),
            watermarks: None,
            early_reclaim: false,
            halt_without_cold: true,
            backend_capacity: None,
            record_events: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    Hit,
    /// First touch mapped a fresh section.
    Populated,
    Fault(FaultResult),
}

/// Counters that must not move when nothing runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineSnapshot {
    pub memory: MemCounters,
    pub backend: BackendStats,
    pub mpool: MpoolReport,
    pub splits: u64,
    pub merges: u64,
    pub reqs: usize,
    pub tracked: usize,
}

#[derive(Debug)]
pub struct Engine {
    space: Arc<AddressSpace>,
    backend: Arc<Backend>,
    lru: Arc<Lru>,
    ranges: Arc<DmaRanges>,
    swap: Arc<SwapEngine>,
    dma: DmaGuard,
    events: Arc<EventLog>,
    policy: Mutex<WatermarkPolicy>,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        let geo = cfg.geometry;
        geo.validate()?;
        let reservation = cfg
            .mpool_reservation
            .unwrap_or_else(|| geo.default_mpool_reservation());
        let space = Arc::new(AddressSpace::new(geo, reservation)?);
        let mut backend = Backend::new(space.mp_size());
        if let Some(cap) = cfg.backend_capacity {
            backend = backend.with_capacity(cap);
        }
        let backend = Arc::new(backend);
        let ranges = Arc::new(DmaRanges::default());
        let events = Arc::new(EventLog::new(cfg.record_events));
        let lru = Arc::new(Lru::new(
            cfg.lru,
            geo.virt_ms_count(),
            space.metadata_ms(),
            ranges.clone(),
        )?);
        let wm = cfg
            .watermarks
            .unwrap_or_else(|| Watermarks::default_for(geo.phys_ms_count));
        let swap = Arc::new(SwapEngine::new(
            space.clone(),
            backend.clone(),
            lru.clone(),
            ranges.clone(),
            events.clone(),
            wm,
        )?);
        let dma = DmaGuard::new(
            space.clone(),
            swap.clone(),
            lru.clone(),
            ranges.clone(),
            events.clone(),
        );
        let mut policy = WatermarkPolicy::new(wm);
        policy.early_reclaim = cfg.early_reclaim;
        policy.halt_without_cold = cfg.halt_without_cold;
        Ok(Self {
            space,
            backend,
            lru,
            ranges,
            swap,
            dma,
            events,
            policy: Mutex::new(policy),
        })
    }

    pub fn space(&self) -> &Arc<AddressSpace> {
        &self.space
    }

    pub fn backend(&self) -> &Arc<Backend> {
        &self.backend
    }

    pub fn lru(&self) -> &Arc<Lru> {
        &self.lru
    }

    pub fn swap(&self) -> &Arc<SwapEngine> {
        &self.swap
    }

    pub fn dma(&self) -> &DmaGuard {
        &self.dma
    }

    pub fn dma_ranges(&self) -> &Arc<DmaRanges> {
        &self.ranges
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    pub fn geometry(&self) -> &Geometry {
        self.space.geometry()
    }

    pub fn watermarks(&self) -> Watermarks {
        self.swap.watermarks()
    }

    /// Guest access to one MP: hit, first-touch populate or swap fault.
    pub fn access(&self, gfn: Gfn, mp: usize) -> Result<AccessOutcome, EngineError> {
        loop {
            if let Translation::Present(_) = self.space.translate(gfn, mp)? {
                self.lru.harvest_access(gfn);
                return Ok(AccessOutcome::Hit);
            }
            if self.space.is_unpopulated(gfn)? {
                if self.populate(gfn)? {
                    return Ok(AccessOutcome::Populated);
                }
                continue;
            }
            match self.swap.fault_in(gfn, mp) {
                Ok(f) => {
                    self.lru.harvest_access(gfn);
                    return Ok(AccessOutcome::Fault(f));
                }
                // Raced with a swap-out or a refill; translate again.
                Err(SwapError::NotSwapped { .. }) => std::thread::yield_now(),
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Access followed by a store of the page contents.
    pub fn write(&self, gfn: Gfn, mp: usize, bytes: &[u8]) -> Result<AccessOutcome, EngineError> {
        loop {
            let outcome = self.access(gfn, mp)?;
            match self.space.write_mp(gfn, mp, bytes) {
                Ok(()) => return Ok(outcome),
                Err(MemError::NotResident { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn read(&self, gfn: Gfn, mp: usize) -> Result<Vec<u8>, EngineError> {
        loop {
            self.access(gfn, mp)?;
            match self.space.read_mp(gfn, mp) {
                Ok(v) => return Ok(v),
                Err(MemError::NotResident { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Returns false when another task populated the section first.
    fn populate(&self, gfn: Gfn) -> Result<bool, EngineError> {
        if self.space.free_ms() <= self.watermarks().min {
            self.swap.emergency_reclaim(1)?;
        }
        match self.space.populate(gfn) {
            Ok(pfn) => {
                self.events.emit(EventKind::Populate { gfn, pfn });
                match self.lru.track(gfn) {
                    Ok(()) | Err(LruError::DmaRegistered(_)) => Ok(true),
                    Err(e) => Err(e.into()),
                }
            }
            Err(MemError::State { .. }) => Ok(false),
            Err(MemError::OutOfMemory) => {
                self.events.emit(EventKind::Oom { gfn });
                Err(SwapError::OutOfMemory.into())
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Device-side access. Never-populated sections are populated first.
    pub fn dma_access(&self, gfn: Gfn, mp: usize) -> Result<DmaAccess, EngineError> {
        while self.space.is_unpopulated(gfn)? {
            self.populate(gfn)?;
        }
        Ok(self.dma.on_dma_access(gfn, mp)?)
    }

    pub fn register_dma(&self, start: Gfn, count: u64, owner: &str) -> Result<(), EngineError> {
        self.dma.register_range(start, count, owner)?;
        Ok(())
    }

    pub fn unregister_dma(&self, start: Gfn, count: u64, owner: &str) -> bool {
        self.dma.unregister_range(start, count, owner)
    }

    pub fn reclaim_state(&self) -> ReclaimState {
        self.policy.lock().state()
    }

    /// Evaluates the watermark policy against current counters.
    pub fn watermark_tick(&self) -> ReclaimDecision {
        let counters = self.space.counters();
        let supply = self.lru.cold_supply();
        let d = self.policy.lock().tick(&counters, supply);
        if let Some((from, to)) = d.transition {
            self.events.emit(EventKind::Watermark {
                from,
                to,
                free_ms: counters.free_ms,
            });
        }
        d
    }

    /// One background reclaim slice: policy tick then at most `max`
    /// swap-outs.
    pub fn reclaim_step(&self, max: usize) -> (ReclaimDecision, ReclaimOutcome) {
        let d = self.watermark_tick();
        let n = (d.target_ms as usize).min(max);
        let out = if n > 0 {
            self.swap.reclaim(n)
        } else {
            ReclaimOutcome::default()
        };
        (d, out)
    }

    pub fn scan_tick(&self, worker: usize) -> ScanReport {
        self.lru.scan_tick(worker)
    }

    /// Cold share of guest memory under management: sections in the cold
    /// half of the LRU plus sections fully swapped out, over tracked plus
    /// fully swapped.
    pub fn cold_ratio(&self) -> f64 {
        let swapped = self.swap.fully_swapped_count();
        let total = self.lru.tracked_count() + swapped;
        if total == 0 {
            0.0
        } else {
            (self.lru.cold_half_count() + swapped) as f64 / total as f64
        }
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        let (splits, merges) = self.space.split_merge_counts();
        EngineSnapshot {
            memory: self.space.counters(),
            backend: self.backend.stats(),
            mpool: self.space.mpool_report(),
            splits,
            merges,
            reqs: self.swap.req_count(),
            tracked: self.lru.tracked_count(),
        }
    }

    pub fn swap_stats(&self) -> SwapStats {
        self.swap.stats()
    }

    pub fn dma_stats(&self) -> DmaStats {
        self.dma.stats()
    }

    /// Cross-component consistency at a quiescent point.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.space.check_conservation() {
            return Err(format!(
                "memory conservation broken: {:?}",
                self.space.counters()
            ));
        }
        self.swap.check_invariants()?;
        if !self.lru.check_partition() {
            return Err("lru partition broken".into());
        }
        let meta = self.space.metadata_ms();
        if self.lru.tracked_ids().iter().any(|g| g.0 < meta) {
            return Err("pinned section tracked by lru".into());
        }
        let view = self.ranges.read();
        if let Some(g) = self
            .lru
            .tracked_ids()
            .into_iter()
            .find(|g| view.contains(*g))
        {
            return Err(format!("dma-registered gfn {g} tracked by lru"));
        }
        drop(view);
        let swapped = self.space.counters().swapped_mp;
        let stored = self.backend.stats().stored_mp;
        if swapped != stored {
            return Err(format!(
                "{swapped} swapped-out MPs but {stored} backend slots"
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> Engine {
        let mut cfg = EngineConfig::new(Geometry::scaled(32, 16));
        cfg.mpool_reservation = Some(64 * 1024);
        cfg.watermarks = Some(Watermarks {
            min: 1,
            low: 3,
            high: 6,
        });
        Engine::new(cfg).unwrap()
    }

    #[test]
    fn first_touch_then_hit() {
        let e = engine();
        assert_eq!(e.access(Gfn(3), 0).unwrap(), AccessOutcome::Populated);
        assert_eq!(e.access(Gfn(3), 5).unwrap(), AccessOutcome::Hit);
        assert!(e.lru.is_tracked(Gfn(3)));
        e.check_invariants().unwrap();
    }

    #[test]
    fn pinned_access_hits_without_tracking() {
        let e = engine();
        assert_eq!(e.access(Gfn(0), 0).unwrap(), AccessOutcome::Hit);
        assert!(!e.lru.is_tracked(Gfn(0)));
    }

    #[test]
    fn fault_restores_written_bytes() {
        let e = engine();
        let page = vec![7u8; e.space.mp_size()];
        e.write(Gfn(4), 2, &page).unwrap();
        e.lru.untrack(Gfn(4));
        assert!(e.swap.swap_out_ms(Gfn(4)).unwrap().reclaimed);
        e.check_invariants().unwrap();
        assert_eq!(e.read(Gfn(4), 2).unwrap(), page);
        match e.access(Gfn(4), 9).unwrap() {
            AccessOutcome::Fault(f) => assert_eq!(f.source, crate::backend::PageSource::Zero),
            other => panic!("{other:?}"),
        }
        e.check_invariants().unwrap();
    }

    #[test]
    fn reclaim_step_follows_watermarks() {
        let e = engine();
        // 31 usable sections; fill until free < low.
        for g in 1..30 {
            e.access(Gfn(g), 0).unwrap();
        }
        for _ in 0..8 {
            e.scan_tick(0);
        }
        let free_before = e.space.free_ms();
        assert!(free_before < 3);
        let (d, out) = e.reclaim_step(usize::MAX);
        assert_eq!(d.target_ms, 6 - free_before);
        assert_eq!(out.reclaimed as u64, d.target_ms);
        assert_eq!(e.space.free_ms(), 6);
        let (d, _) = e.reclaim_step(usize::MAX);
        assert_eq!(d.state, crate::events::ReclaimState::Idle);
        e.check_invariants().unwrap();
    }

    #[test]
    fn populate_runs_emergency_reclaim() {
        let e = engine();
        for g in 1..30 {
            e.access(Gfn(g), 0).unwrap();
        }
        for _ in 0..8 {
            e.scan_tick(0);
        }
        // Populating past the last free section reclaims first.
        for g in 30..40 {
            e.access(Gfn(g), 0).unwrap();
            assert!(e.space.free_ms() >= 1);
        }
        assert!(e.swap_stats().emergency_runs > 0);
        e.check_invariants().unwrap();
    }

    #[test]
    fn oom_without_cold_supply() {
        let e = engine();
        let mut err = None;
        for g in 1..48 {
            if let Err(x) = e.access(Gfn(g), 0) {
                err = Some(x);
                break;
            }
        }
        assert!(err.unwrap().is_oom());
        assert!(e.events.count(|k| matches!(k, EventKind::Oom { .. })) > 0);
    }
}
