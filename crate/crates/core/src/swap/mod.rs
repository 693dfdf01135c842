// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Parallel swap engine.
//!
//! Each section under swap control owns a [`SwapReq`] kept in an ordered
//! index keyed by guest frame. Four layers keep per-MP swaps atomic while
//! letting faults on different MPs of one section proceed in parallel:
//!
//! 1. the request entity itself, unique per section;
//! 2. a reader/writer lock: active tasks (swap-out, prefetch) take it for
//!    writing and are serialized, fault-ins take it for reading and run in
//!    parallel. A fault that finds a writer raises the cancel flag, which the
//!    writer polls between MPs;
//! 3. two bitmaps: swapped-out (set by the writer, guards swap-in) and
//!    swapping-in (test-and-set by faults, one winner per MP);
//! 4. section state: the mapping is split before the first MP leaves and
//!    merged after the last MP returns; the physical section is reclaimed
//!    after the last MP leaves and allocated before the first one returns.

mod req;
mod watermark;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use thiserror::Error;

pub use req::{MsState, SwapReq, REQ_HEADER_BYTES};
pub use watermark::{ReclaimDecision, WatermarkPolicy, Watermarks};

use crate::backend::{Backend, BackendError, PageSource, SlotKind};
use crate::dma_guard::DmaRanges;
use crate::events::{AbortReason, EventKind, EventLog};
use crate::lru::Lru;
use crate::mem_model::{
    AddressSpace, Gfn, Mapping, MemError, MetaTag, Pfn, SizeClass, Translation,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwapError {
    #[error("gfn {gfn} mp {mp}: no swapped-out page to bring in")]
    NotSwapped { gfn: Gfn, mp: usize },
    #[error("gfn {0} is not resident")]
    NotResident(Gfn),
    #[error("gfn {0} belongs to the pinned metadata window")]
    Pinned(Gfn),
    #[error("gfn {gfn} mp {mp} is corrupted: {source}")]
    Corrupted {
        gfn: Gfn,
        mp: usize,
        source: BackendError,
    },
    #[error("out of memory: no cold sections left to reclaim")]
    OutOfMemory,
    #[error("cannot allocate request metadata: {0}")]
    Metadata(MemError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("swap configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultRole {
    /// Restored the page.
    Winner,
    /// Waited for another fault to restore it.
    Waiter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultResult {
    pub latency: Duration,
    pub source: PageSource,
    pub role: FaultRole,
    /// This fault allocated the physical section.
    pub allocated: bool,
    /// This fault completed the section and merged its mapping.
    pub merged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapOutReport {
    pub gfn: Gfn,
    pub swapped_now: usize,
    pub state: MsState,
    pub reclaimed: bool,
    pub aborted: Option<AbortReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefetchReport {
    pub restored: usize,
    pub merged: bool,
    pub cancelled: bool,
    /// MPs left behind because they are quarantined.
    pub stuck: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReclaimOutcome {
    pub candidates: usize,
    pub reclaimed: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SwapStats {
    pub mp_out: u64,
    pub mp_in: u64,
    pub reclaims: u64,
    pub allocs: u64,
    pub aborts: u64,
    pub ooms: u64,
    pub emergency_runs: u64,
    pub quarantines: u64,
    pub exclusion_violations: u64,
}

#[derive(Debug, Default)]
struct Counters {
    mp_out: AtomicU64,
    mp_in: AtomicU64,
    reclaims: AtomicU64,
    allocs: AtomicU64,
    aborts: AtomicU64,
    ooms: AtomicU64,
    emergency_runs: AtomicU64,
    quarantines: AtomicU64,
    exclusion_violations: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug)]
pub struct SwapEngine {
    space: Arc<AddressSpace>,
    backend: Arc<Backend>,
    lru: Arc<Lru>,
    dma: Arc<DmaRanges>,
    events: Arc<EventLog>,
    index: RwLock<BTreeMap<Gfn, Arc<SwapReq>>>,
    index_generation: AtomicU64,
    watermarks: Watermarks,
    counters: Counters,
}

impl SwapEngine {
    pub fn new(
        space: Arc<AddressSpace>,
        backend: Arc<Backend>,
        lru: Arc<Lru>,
        dma: Arc<DmaRanges>,
        events: Arc<EventLog>,
        watermarks: Watermarks,
    ) -> Result<Self, SwapError> {
        watermarks.validate(space.geometry().phys_ms_count)?;
        Ok(Self {
            space,
            backend,
            lru,
            dma,
            events,
            index: RwLock::new(BTreeMap::new()),
            index_generation: AtomicU64::new(0),
            watermarks,
            counters: Counters::default(),
        })
    }

    pub fn watermarks(&self) -> Watermarks {
        self.watermarks
    }

    pub fn req(&self, gfn: Gfn) -> Option<Arc<SwapReq>> {
        self.index.read().get(&gfn).cloned()
    }

    pub fn reqs(&self) -> Vec<Arc<SwapReq>> {
        self.index.read().values().cloned().collect()
    }

    pub fn req_count(&self) -> usize {
        self.index.read().len()
    }

    /// Raises the cancel flag of the active task on `gfn`, if any.
    pub fn cancel(&self, gfn: Gfn) {
        if let Some(r) = self.req(gfn) {
            r.cancel.store(true, Ordering::Release);
        }
    }

    /// Test hook: corrupts the stored slot of one swapped-out MP.
    pub fn inject_corruption(&self, gfn: Gfn, mp: usize, bit: usize) -> bool {
        let Some(r) = self.req(gfn) else { return false };
        let mut slots = r.slots.lock();
        match slots.get_mut(mp).and_then(|s| s.as_mut()) {
            Some(slot) => {
                slot.flip_bit(bit);
                true
            }
            None => false,
        }
    }

    fn get_or_create(&self, gfn: Gfn) -> Result<Arc<SwapReq>, SwapError> {
        if let Some(r) = self.req(gfn) {
            return Ok(r);
        }
        let mut index = self.index.write();
        if let Some(r) = index.get(&gfn) {
            return Ok(r.clone());
        }
        let pfn = match self.space.mapping(gfn)? {
            Mapping::Huge(pfn) => pfn,
            Mapping::NotPresent => return Err(SwapError::NotResident(gfn)),
            m @ Mapping::Small(_) => {
                return Err(SwapError::Mem(MemError::State {
                    gfn,
                    expected: "huge",
                    found: m.kind(),
                }))
            }
        };
        let mps = self.space.mps_per_ms();
        let bytes = SwapReq::metadata_bytes(mps);
        let class = SizeClass::fitting(bytes, self.space.geometry().ms_size).ok_or_else(|| {
            SwapError::Config(format!("request of {bytes} bytes exceeds a section"))
        })?;
        let meta = self
            .space
            .mpool_alloc(class, MetaTag::SwapReqs)
            .map_err(SwapError::Metadata)?;
        let req = Arc::new(SwapReq::new(gfn, pfn, mps, meta));
        index.insert(gfn, req.clone());
        self.index_generation.fetch_add(1, Ordering::AcqRel);
        Ok(req)
    }

    /// Removes a fully resident request. Caller holds the request lock.
    fn retire(&self, req: &Arc<SwapReq>) {
        req.retired.store(true, Ordering::Release);
        {
            let mut index = self.index.write();
            if index.get(&req.gfn).is_some_and(|r| Arc::ptr_eq(r, req)) {
                index.remove(&req.gfn);
            }
        }
        if let Some(block) = req.meta.lock().take() {
            self.space.mpool_free(block);
        }
    }

    /// Serialized swap-out of every remaining MP of `gfn`.
    pub fn swap_out_ms(&self, gfn: Gfn) -> Result<SwapOutReport, SwapError> {
        if self.space.is_pinned(gfn) {
            return Err(SwapError::Pinned(gfn));
        }
        loop {
            if self.dma.contains(gfn) {
                bump(&self.counters.aborts);
                let _ = self.lru.track(gfn);
                return Ok(SwapOutReport {
                    gfn,
                    swapped_now: 0,
                    state: self.req(gfn).map_or(MsState::Resident, |r| r.state()),
                    reclaimed: false,
                    aborted: Some(AbortReason::DmaRegistered),
                });
            }
            let req = self.get_or_create(gfn)?;
            let _w = req.lock.write();
            if req.is_retired() {
                continue;
            }
            req.cancel.store(false, Ordering::Release);
            req.writer_active.store(true, Ordering::Release);
            let result = self.swap_out_locked(&req);
            req.writer_active.store(false, Ordering::Release);
            return result;
        }
    }

    fn swap_out_locked(&self, req: &Arc<SwapReq>) -> Result<SwapOutReport, SwapError> {
        let gfn = req.gfn;
        let mps = self.space.mps_per_ms();
        let mut swapped_now = 0;
        let mut aborted = None;

        for mp in 0..mps {
            if req.swapped_out.get(mp) {
                continue;
            }
            if req.cancel.load(Ordering::Acquire) {
                aborted = Some(AbortReason::Cancelled);
                break;
            }
            // Held through the MP step: a registration is ordered entirely
            // before or after it.
            let dma = self.dma.read();
            if dma.contains(gfn) {
                aborted = Some(AbortReason::DmaRegistered);
                break;
            }
            if req.state() == MsState::Resident {
                self.space.split_mapping(gfn)?;
                self.events.emit(EventKind::Split { gfn });
                req.set_state(MsState::Splitting);
            }
            let pfn = req.pfn().expect("resident section without frame");
            self.space.unmap_mp(gfn, mp)?;
            let content = self.space.take_frame_mp(pfn, mp);
            let slot = match self.backend.store_content(&content) {
                Ok(slot) => slot,
                Err(_) => {
                    self.space.write_frame_mp(pfn, mp, content);
                    self.space.install_mp(gfn, mp, pfn)?;
                    aborted = Some(AbortReason::BackendFull);
                    break;
                }
            };
            let zero = slot.kind() == SlotKind::Zero;
            req.slots.lock()[mp] = Some(slot);
            if zero {
                req.zero_page.test_and_set(mp);
            } else {
                req.zero_page.test_and_clear(mp);
            }
            req.quarantined.test_and_clear(mp);
            req.swapped_out.test_and_set(mp);
            req.outstanding.fetch_add(1, Ordering::AcqRel);
            self.space.add_swapped_mp(1);
            bump(&self.counters.mp_out);
            self.events.emit(EventKind::MpOut { gfn, mp });
            drop(dma);
            req.set_state(MsState::PartiallySwapped);
            swapped_now += 1;
        }

        let outstanding = req.outstanding.load(Ordering::Acquire);
        let mut reclaimed = false;
        if let Some(reason) = aborted {
            bump(&self.counters.aborts);
            self.events.emit(EventKind::SwapOutAborted {
                gfn,
                reason,
                swapped: outstanding,
            });
            if outstanding == 0 {
                // Nothing left the section: undo a split made for it.
                if let Some(pfn) = req.pfn() {
                    if matches!(self.space.mapping(gfn)?, Mapping::Small(_)) {
                        self.space.merge_mapping(gfn, pfn)?;
                        self.events.emit(EventKind::Merge { gfn, pfn });
                    }
                }
                req.set_state(MsState::Resident);
                self.retire(req);
            }
            let _ = self.lru.track(gfn);
        } else if outstanding == mps {
            let mut frame = req.frame.lock();
            if let Some(pfn) = frame.take() {
                self.space.release_frame(pfn);
                bump(&self.counters.reclaims);
                self.events.emit(EventKind::Reclaim { gfn, pfn });
                reclaimed = true;
            }
            req.set_state(MsState::FullySwapped);
        }
        Ok(SwapOutReport {
            gfn,
            swapped_now,
            state: req.state(),
            reclaimed,
            aborted,
        })
    }

    /// Page-fault driven swap-in of one MP. Safe to call concurrently from
    /// any number of workers.
    pub fn fault_in(&self, gfn: Gfn, mp: usize) -> Result<FaultResult, SwapError> {
        let start = Instant::now();
        let mps = self.space.mps_per_ms();
        if mp >= mps {
            return Err(MemError::MpOutOfRange { mp, mps }.into());
        }
        loop {
            let generation = self.index_generation.load(Ordering::Acquire);
            let Some(req) = self.req(gfn) else {
                // A request appearing after the lookup means a swap-out just
                // started on this section; look again.
                if self.index_generation.load(Ordering::Acquire) != generation {
                    continue;
                }
                return Err(SwapError::NotSwapped { gfn, mp });
            };

            if req.state() == MsState::FullySwapped && self.space.free_ms() <= self.watermarks.min {
                self.emergency_reclaim(1)?;
            }

            let _r = match req.lock.try_read() {
                Some(g) => g,
                None => {
                    req.cancel.store(true, Ordering::Release);
                    req.lock.read()
                }
            };
            if req.is_retired() {
                continue;
            }
            if !req.swapped_out.get(mp) {
                return Err(SwapError::NotSwapped { gfn, mp });
            }
            if req.quarantined.get(mp) {
                return Err(self.corruption(gfn, mp));
            }
            if req.swapping_in.test_and_set(mp) {
                req.wait_swap_in(mp);
                if req.swapped_out.get(mp) {
                    if req.quarantined.get(mp) {
                        return Err(self.corruption(gfn, mp));
                    }
                    // Winner gave up (allocation failure): try again.
                    continue;
                }
                return Ok(FaultResult {
                    latency: start.elapsed(),
                    source: req.source_of(mp),
                    role: FaultRole::Waiter,
                    allocated: false,
                    merged: false,
                });
            }
            if !req.swapped_out.get(mp) {
                req.swapping_in.test_and_clear(mp);
                req.notify();
                return Err(SwapError::NotSwapped { gfn, mp });
            }
            if req.writer_active.load(Ordering::Acquire) {
                bump(&self.counters.exclusion_violations);
            }
            let restored = self.restore_mp(&req, mp);
            req.swapping_in.test_and_clear(mp);
            req.notify();
            let (pfn, source, allocated) = restored?;
            let merged = self.complete_mp(&req, pfn)?;
            return Ok(FaultResult {
                latency: start.elapsed(),
                source,
                role: FaultRole::Winner,
                allocated,
                merged,
            });
        }
    }

    fn corruption(&self, gfn: Gfn, mp: usize) -> SwapError {
        SwapError::Corrupted {
            gfn,
            mp,
            source: BackendError::CrcMismatch {
                stored: 0,
                computed: 0,
            },
        }
    }

    /// Moves one MP from the backend into the section frame. The caller owns
    /// the MP through its swapping-in bit or the write lock.
    fn restore_mp(&self, req: &SwapReq, mp: usize) -> Result<(Pfn, PageSource, bool), SwapError> {
        let gfn = req.gfn;
        let (pfn, allocated) = {
            let mut frame = req.frame.lock();
            match *frame {
                Some(p) => (p, false),
                None => match self.space.alloc_frame() {
                    Ok(p) => {
                        *frame = Some(p);
                        req.set_state(MsState::Refilling);
                        bump(&self.counters.allocs);
                        self.events.emit(EventKind::AllocMs { gfn, pfn: p });
                        (p, true)
                    }
                    Err(_) => {
                        bump(&self.counters.ooms);
                        self.events.emit(EventKind::Oom { gfn });
                        return Err(SwapError::OutOfMemory);
                    }
                },
            }
        };
        let slot = req.slots.lock()[mp]
            .take()
            .unwrap_or_else(|| panic!("gfn {gfn} mp {mp}: swapped-out bit without backend slot"));
        let content = match self.backend.load_content(&slot) {
            Ok(c) => c,
            Err(e) => {
                req.slots.lock()[mp] = Some(slot);
                req.quarantined.test_and_set(mp);
                bump(&self.counters.quarantines);
                self.events.emit(EventKind::Quarantine { gfn, mp });
                return Err(SwapError::Corrupted { gfn, mp, source: e });
            }
        };
        let source = slot.source();
        self.space.write_frame_mp(pfn, mp, content);
        self.space.install_mp(gfn, mp, pfn)?;
        self.backend.release(slot);
        req.swapped_out.test_and_clear(mp);
        self.space.add_swapped_mp(-1);
        bump(&self.counters.mp_in);
        self.events.emit(EventKind::MpIn { gfn, mp, source });
        Ok((pfn, source, allocated))
    }

    /// Accounts one restored MP; the task restoring the last one merges the
    /// mapping and retires the request. Returns whether it merged.
    fn complete_mp(&self, req: &Arc<SwapReq>, pfn: Pfn) -> Result<bool, SwapError> {
        if req.outstanding.fetch_sub(1, Ordering::AcqRel) != 1 {
            return Ok(false);
        }
        let gfn = req.gfn;
        self.space.merge_mapping(gfn, pfn)?;
        self.events.emit(EventKind::Merge { gfn, pfn });
        req.set_state(MsState::Resident);
        self.retire(req);
        let _ = self.lru.track(gfn);
        Ok(true)
    }

    /// Serialized swap-in of every remaining MP of `gfn`. Honors cancel.
    pub fn prefetch_in(&self, gfn: Gfn) -> Result<PrefetchReport, SwapError> {
        let mut report = PrefetchReport {
            restored: 0,
            merged: false,
            cancelled: false,
            stuck: 0,
        };
        loop {
            let Some(req) = self.req(gfn) else {
                return Ok(report);
            };
            if req.state() == MsState::FullySwapped && self.space.free_ms() <= self.watermarks.min {
                self.emergency_reclaim(1)?;
            }
            let _w = req.lock.write();
            if req.is_retired() {
                continue;
            }
            req.cancel.store(false, Ordering::Release);
            req.writer_active.store(true, Ordering::Release);
            let result = self.prefetch_locked(&req, &mut report);
            req.writer_active.store(false, Ordering::Release);
            result?;
            return Ok(report);
        }
    }

    fn prefetch_locked(
        &self,
        req: &Arc<SwapReq>,
        report: &mut PrefetchReport,
    ) -> Result<(), SwapError> {
        let pending: Vec<usize> = req.swapped_out.iter_ones().collect();
        for mp in pending {
            if req.quarantined.get(mp) {
                report.stuck += 1;
                continue;
            }
            if req.cancel.load(Ordering::Acquire) {
                report.cancelled = true;
                return Ok(());
            }
            req.swapping_in.test_and_set(mp);
            let restored = self.restore_mp(req, mp);
            req.swapping_in.test_and_clear(mp);
            match restored {
                Ok((pfn, _, _)) => {
                    report.restored += 1;
                    if self.complete_mp(req, pfn)? {
                        report.merged = true;
                    }
                }
                Err(SwapError::Corrupted { .. }) => report.stuck += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Swaps out up to `n` of the coldest sections.
    pub fn reclaim(&self, n: usize) -> ReclaimOutcome {
        let mut out = ReclaimOutcome::default();
        for gfn in self.lru.coldest(n) {
            out.candidates += 1;
            match self.swap_out_ms(gfn) {
                Ok(r) if r.reclaimed => out.reclaimed += 1,
                Ok(r) if r.aborted.is_some() => out.aborted += 1,
                Ok(_) => {}
                Err(_) => out.aborted += 1,
            }
        }
        out
    }

    /// Synchronous reclaim from the fault path until at least
    /// `min + headroom` sections are free.
    pub fn emergency_reclaim(&self, headroom: u64) -> Result<usize, SwapError> {
        let target = self.watermarks.min + headroom;
        let mut reclaimed = 0;
        if self.space.free_ms() >= target {
            return Ok(0);
        }
        bump(&self.counters.emergency_runs);
        while self.space.free_ms() < target {
            let need = (target - self.space.free_ms()) as usize;
            let cands = self.lru.coldest(need);
            if cands.is_empty() {
                bump(&self.counters.ooms);
                self.events.emit(EventKind::Oom { gfn: Gfn(u64::MAX) });
                return Err(SwapError::OutOfMemory);
            }
            for gfn in cands {
                if let Ok(r) = self.swap_out_ms(gfn) {
                    reclaimed += r.reclaimed as usize;
                }
            }
        }
        Ok(reclaimed)
    }

    pub fn stats(&self) -> SwapStats {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Acquire);
        SwapStats {
            mp_out: l(&c.mp_out),
            mp_in: l(&c.mp_in),
            reclaims: l(&c.reclaims),
            allocs: l(&c.allocs),
            aborts: l(&c.aborts),
            ooms: l(&c.ooms),
            emergency_runs: l(&c.emergency_runs),
            quarantines: l(&c.quarantines),
            exclusion_violations: l(&c.exclusion_violations),
        }
    }

    /// Sections currently fully swapped out.
    pub fn fully_swapped_count(&self) -> usize {
        self.index
            .read()
            .values()
            .filter(|r| r.state() == MsState::FullySwapped)
            .count()
    }

    /// Physical memory currently given back by full swap-outs.
    pub fn freed_bytes(&self) -> u64 {
        self.fully_swapped_count() as u64 * self.space.geometry().ms_size
    }

    /// Accounted request metadata across live requests.
    pub fn req_metadata_bytes(&self) -> u64 {
        self.req_count() as u64 * SwapReq::metadata_bytes(self.space.mps_per_ms())
    }

    /// Quiescent consistency check across all requests and the mapping
    /// table.
    pub fn check_invariants(&self) -> Result<(), String> {
        for req in self.reqs() {
            req.check_invariants()?;
            if req.swapping_in.count_ones() != 0 {
                return Err(format!(
                    "gfn {}: swapping-in bits left at quiescence",
                    req.gfn
                ));
            }
            if self.space.is_pinned(req.gfn) {
                return Err(format!("pinned gfn {} under swap control", req.gfn));
            }
            for mp in 0..self.space.mps_per_ms() {
                let present = matches!(
                    self.space.translate(req.gfn, mp),
                    Ok(Translation::Present(_))
                );
                if present == req.swapped_out.get(mp) {
                    return Err(format!(
                        "gfn {} mp {mp}: mapping present={present} disagrees with bitmap",
                        req.gfn
                    ));
                }
            }
        }
        Ok(())
    }
}
