// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! DMA range registry and DMAR recovery.
//!
//! Registered ranges are pinned: they are swapped in eagerly on
//! registration, dropped from LRU tracking and refused by swap-out. Device
//! accesses to non-resident pages outside any range raise a DMAR event which
//! is recovered by a synchronous fault-in and a single retry.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard};
use thiserror::Error;

use crate::events::{EventKind, EventLog};
use crate::lru::Lru;
use crate::mem_model::{AddressSpace, Gfn, Mapping, TableView, Translation};
use crate::swap::{SwapEngine, SwapError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DmaError {
    #[error("range {start}+{count} outside virtual capacity")]
    OutOfRange { start: Gfn, count: u64 },
    #[error("range {start}+{count} overlaps the pinned metadata window")]
    Pinned { start: Gfn, count: u64 },
    #[error("range {start}+{count} overlaps a range owned by {owner}")]
    Overlap {
        start: Gfn,
        count: u64,
        owner: String,
    },
    #[error("empty range")]
    Empty,
    #[error("gfn {gfn} mp {mp} still not resident after DMAR recovery")]
    RetryFailed { gfn: Gfn, mp: usize },
    #[error(transparent)]
    Swap(#[from] SwapError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DmaRange {
    pub start: Gfn,
    pub count: u64,
    pub owner: String,
    pub active: bool,
}

impl DmaRange {
    pub fn end(&self) -> u64 {
        self.start.0 + self.count
    }

    pub fn contains(&self, gfn: Gfn) -> bool {
        gfn.0 >= self.start.0 && gfn.0 < self.end()
    }

    fn overlaps(&self, start: u64, end: u64) -> bool {
        self.start.0 < end && start < self.end()
    }
}

/// Active ranges, sorted by start and pairwise disjoint.
#[derive(Debug, Default)]
pub struct DmaRanges {
    ranges: RwLock<Vec<DmaRange>>,
}

/// Read view of the registry. While held, no range changes.
pub struct DmaView<'a> {
    ranges: RwLockReadGuard<'a, Vec<DmaRange>>,
}

impl DmaView<'_> {
    pub fn contains(&self, gfn: Gfn) -> bool {
        find(&self.ranges, gfn).is_some()
    }
}

fn find(ranges: &[DmaRange], gfn: Gfn) -> Option<&DmaRange> {
    let i = ranges.partition_point(|r| r.end() <= gfn.0);
    ranges.get(i).filter(|r| r.contains(gfn))
}

impl DmaRanges {
    pub fn read(&self) -> DmaView<'_> {
        DmaView {
            ranges: self.ranges.read(),
        }
    }

    pub fn contains(&self, gfn: Gfn) -> bool {
        self.read().contains(gfn)
    }

    pub fn active_ranges(&self) -> Vec<DmaRange> {
        self.ranges.read().clone()
    }

    /// Sections currently covered by active ranges.
    pub fn covered_ms(&self) -> u64 {
        self.ranges.read().iter().map(|r| r.count).sum()
    }

    #[cfg(test)]
    pub(crate) fn activate_for_test(&self, start: Gfn, count: u64, owner: &str) {
        let mut r = self.ranges.write();
        r.push(DmaRange {
            start,
            count,
            owner: owner.to_string(),
            active: true,
        });
        r.sort_by_key(|r| r.start);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmarEvent {
    pub gfn: Gfn,
    pub mp: usize,
    pub recovered: bool,
    pub crc_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmaAccess {
    Ok,
    Recovered(DmarEvent),
    /// Non-resident page inside an active range.
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegisterReport {
    pub prefetched_ms: usize,
    pub restored_mp: usize,
    /// MPs that could not be brought back (quarantined).
    pub stuck_mp: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DmaStats {
    pub registrations: u64,
    pub rejections: u64,
    pub unregistrations: u64,
    pub dmar_events: u64,
    pub recovered: u64,
    pub crc_failures: u64,
    pub violations: u64,
}

#[derive(Debug, Default)]
struct Counters {
    registrations: AtomicU64,
    rejections: AtomicU64,
    unregistrations: AtomicU64,
    dmar_events: AtomicU64,
    recovered: AtomicU64,
    crc_failures: AtomicU64,
    violations: AtomicU64,
}

#[derive(Debug)]
pub struct DmaGuard {
    space: Arc<AddressSpace>,
    swap: Arc<SwapEngine>,
    lru: Arc<Lru>,
    ranges: Arc<DmaRanges>,
    events: Arc<EventLog>,
    counters: Counters,
}

impl DmaGuard {
    pub fn new(
        space: Arc<AddressSpace>,
        swap: Arc<SwapEngine>,
        lru: Arc<Lru>,
        ranges: Arc<DmaRanges>,
        events: Arc<EventLog>,
    ) -> Self {
        Self {
            space,
            swap,
            lru,
            ranges,
            events,
            counters: Counters::default(),
        }
    }

    pub fn ranges(&self) -> &Arc<DmaRanges> {
        &self.ranges
    }

    /// Activates `[start, start + count)` for `owner` and swaps in every
    /// section of it before returning.
    pub fn register_range(
        &self,
        start: Gfn,
        count: u64,
        owner: &str,
    ) -> Result<RegisterReport, DmaError> {
        let reject = |e: DmaError| {
            self.counters.rejections.fetch_add(1, Ordering::Relaxed);
            Err(e)
        };
        if count == 0 {
            return reject(DmaError::Empty);
        }
        let end = start.0.saturating_add(count);
        if end > self.space.geometry().virt_ms_count() {
            return reject(DmaError::OutOfRange { start, count });
        }
        if start.0 < self.space.metadata_ms() {
            return reject(DmaError::Pinned { start, count });
        }
        {
            let mut ranges = self.ranges.ranges.write();
            if let Some(other) = ranges
                .iter()
                .find(|r| r.overlaps(start.0, end) && r.owner != owner)
            {
                let owner = other.owner.clone();
                drop(ranges);
                return reject(DmaError::Overlap {
                    start,
                    count,
                    owner,
                });
            }
            let mut lo = start.0;
            let mut hi = end;
            // Same-owner ranges that overlap or touch are folded in.
            ranges.retain(|r| {
                let fold = r.owner == owner && r.start.0 <= hi && lo <= r.end();
                if fold {
                    lo = lo.min(r.start.0);
                    hi = hi.max(r.end());
                }
                !fold
            });
            ranges.push(DmaRange {
                start: Gfn(lo),
                count: hi - lo,
                owner: owner.to_string(),
                active: true,
            });
            ranges.sort_by_key(|r| r.start);
            self.events.emit(EventKind::DmaActivate {
                start,
                count,
                owner: owner.to_string(),
            });
        }
        self.counters.registrations.fetch_add(1, Ordering::Relaxed);

        let mut report = RegisterReport::default();
        for g in start.0..end {
            let gfn = Gfn(g);
            self.lru.untrack(gfn);
            let mut touched = false;
            while self.swap.req(gfn).is_some() {
                let r = self.swap.prefetch_in(gfn)?;
                touched |= r.restored > 0;
                report.restored_mp += r.restored;
                if !r.cancelled && r.restored == 0 {
                    report.stuck_mp += r.stuck;
                    break;
                }
            }
            report.prefetched_ms += touched as usize;
        }
        Ok(report)
    }

    /// Removes `owner`'s coverage of `[start, start + count)`. Returns false
    /// when nothing was active there.
    pub fn unregister_range(&self, start: Gfn, count: u64, owner: &str) -> bool {
        let end = start.0.saturating_add(count);
        let mut released = Vec::new();
        {
            let mut ranges = self.ranges.ranges.write();
            let mut kept = Vec::with_capacity(ranges.len() + 1);
            for r in ranges.drain(..) {
                if r.owner != owner || !r.overlaps(start.0, end) {
                    kept.push(r);
                    continue;
                }
                let cut_lo = r.start.0.max(start.0);
                let cut_hi = r.end().min(end);
                released.push((cut_lo, cut_hi));
                if r.start.0 < cut_lo {
                    kept.push(DmaRange {
                        count: cut_lo - r.start.0,
                        ..r.clone()
                    });
                }
                if cut_hi < r.end() {
                    kept.push(DmaRange {
                        start: Gfn(cut_hi),
                        count: r.end() - cut_hi,
                        ..r.clone()
                    });
                }
            }
            kept.sort_by_key(|r| r.start);
            *ranges = kept;
            for &(lo, hi) in &released {
                self.events.emit(EventKind::DmaDeactivate {
                    start: Gfn(lo),
                    count: hi - lo,
                });
            }
        }
        if released.is_empty() {
            return false;
        }
        self.counters
            .unregistrations
            .fetch_add(1, Ordering::Relaxed);
        for (lo, hi) in released {
            for g in lo..hi {
                let gfn = Gfn(g);
                if !matches!(self.space.mapping(gfn), Ok(Mapping::NotPresent) | Err(_)) {
                    let _ = self.lru.track(gfn);
                }
            }
        }
        true
    }

    /// Device-side access through the IOMMU view.
    pub fn on_dma_access(&self, gfn: Gfn, mp: usize) -> Result<DmaAccess, DmaError> {
        if let Translation::Present(_) = self
            .space
            .translate_in(TableView::Iommu, gfn, mp)
            .map_err(SwapError::from)?
        {
            return Ok(DmaAccess::Ok);
        }
        if self.ranges.contains(gfn) {
            self.counters.violations.fetch_add(1, Ordering::Relaxed);
            self.events.emit(EventKind::DmaViolation { gfn, mp });
            return Ok(DmaAccess::Violation);
        }
        self.counters.dmar_events.fetch_add(1, Ordering::Relaxed);
        let crc_ok = match self.swap.fault_in(gfn, mp) {
            Ok(_) | Err(SwapError::NotSwapped { .. }) => true,
            Err(SwapError::Corrupted { .. }) => false,
            Err(e) => return Err(e.into()),
        };
        let resident = matches!(
            self.space
                .translate_in(TableView::Iommu, gfn, mp)
                .map_err(SwapError::from)?,
            Translation::Present(_)
        );
        let recovered = crc_ok && resident;
        self.events.emit(EventKind::Dmar {
            gfn,
            mp,
            recovered,
            crc_ok,
        });
        if !crc_ok {
            self.counters.crc_failures.fetch_add(1, Ordering::Relaxed);
        }
        if !resident && crc_ok {
            return Err(DmaError::RetryFailed { gfn, mp });
        }
        if recovered {
            self.counters.recovered.fetch_add(1, Ordering::Relaxed);
        }
        Ok(DmaAccess::Recovered(DmarEvent {
            gfn,
            mp,
            recovered,
            crc_ok,
        }))
    }

    pub fn stats(&self) -> DmaStats {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Acquire);
        DmaStats {
            registrations: l(&c.registrations),
            rejections: l(&c.rejections),
            unregistrations: l(&c.unregistrations),
            dmar_events: l(&c.dmar_events),
            recovered: l(&c.recovered),
            crc_failures: l(&c.crc_failures),
            violations: l(&c.violations),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Backend;
    use crate::lru::LruConfig;
    use crate::mem_model::Geometry;
    use crate::swap::Watermarks;

    struct Rig {
        space: Arc<AddressSpace>,
        swap: Arc<SwapEngine>,
        lru: Arc<Lru>,
        guard: DmaGuard,
    }

    fn rig() -> Rig {
        let geo = Geometry::scaled(32, 16);
        let space = Arc::new(AddressSpace::new(geo, 64 * 1024).unwrap());
        let ranges = Arc::new(DmaRanges::default());
        let events = Arc::new(EventLog::new(true));
        let lru = Arc::new(
            Lru::new(
                LruConfig::default(),
                geo.virt_ms_count(),
                space.metadata_ms(),
                ranges.clone(),
            )
            .unwrap(),
        );
        let backend = Arc::new(Backend::new(space.mp_size()));
        let swap = Arc::new(
            SwapEngine::new(
                space.clone(),
                backend,
                lru.clone(),
                ranges.clone(),
                events.clone(),
                Watermarks {
                    min: 1,
                    low: 2,
                    high: 4,
                },
            )
            .unwrap(),
        );
        let guard = DmaGuard::new(space.clone(), swap.clone(), lru.clone(), ranges, events);
        Rig {
            space,
            swap,
            lru,
            guard,
        }
    }

    fn populate(r: &Rig, g: u64) {
        r.space.populate(Gfn(g)).unwrap();
        r.space
            .write_mp(Gfn(g), 3, &vec![0xab; r.space.mp_size()])
            .unwrap();
        r.lru.track(Gfn(g)).unwrap();
    }

    #[test]
    fn register_over_resident_is_immediate() {
        let r = rig();
        for g in 2..6 {
            populate(&r, g);
        }
        let rep = r.guard.register_range(Gfn(2), 4, "nic").unwrap();
        assert_eq!(rep, RegisterReport::default());
        for g in 2..6 {
            assert!(!r.lru.is_tracked(Gfn(g)));
        }
        assert_eq!(
            r.swap.swap_out_ms(Gfn(3)).unwrap().aborted,
            Some(crate::events::AbortReason::DmaRegistered)
        );
    }

    #[test]
    fn register_swaps_in_before_return() {
        let r = rig();
        populate(&r, 4);
        r.lru.untrack(Gfn(4));
        r.swap.swap_out_ms(Gfn(4)).unwrap();
        assert!(matches!(
            r.space.mapping(Gfn(4)).unwrap(),
            Mapping::Small(_)
        ));
        let rep = r.guard.register_range(Gfn(4), 1, "nic").unwrap();
        assert_eq!(rep.prefetched_ms, 1);
        assert_eq!(rep.restored_mp, 16);
        assert!(matches!(r.space.mapping(Gfn(4)).unwrap(), Mapping::Huge(_)));
        assert!(r.swap.req(Gfn(4)).is_none());
        assert_eq!(
            r.space.read_mp(Gfn(4), 3).unwrap(),
            vec![0xab; r.space.mp_size()]
        );
    }

    #[test]
    fn overlap_rules() {
        let r = rig();
        r.guard.register_range(Gfn(4), 4, "a").unwrap();
        r.guard.register_range(Gfn(6), 4, "a").unwrap();
        assert_eq!(r.guard.ranges().active_ranges().len(), 1);
        assert_eq!(r.guard.ranges().active_ranges()[0].count, 6);
        assert!(matches!(
            r.guard.register_range(Gfn(9), 2, "b"),
            Err(DmaError::Overlap { .. })
        ));
        assert!(matches!(
            r.guard.register_range(Gfn(0), 2, "b"),
            Err(DmaError::Pinned { .. })
        ));
        assert!(matches!(
            r.guard.register_range(Gfn(47), 2, "b"),
            Err(DmaError::OutOfRange { .. })
        ));
        assert_eq!(r.guard.stats().rejections, 3);
    }

    #[test]
    fn unregister_retracks_and_double_is_noop() {
        let r = rig();
        populate(&r, 5);
        r.guard.register_range(Gfn(4), 3, "nic").unwrap();
        assert!(!r.lru.is_tracked(Gfn(5)));
        assert!(r.guard.unregister_range(Gfn(4), 3, "nic"));
        assert!(r.lru.is_tracked(Gfn(5)));
        assert!(!r.lru.is_tracked(Gfn(4)));
        assert!(!r.guard.unregister_range(Gfn(4), 3, "nic"));
        assert!(r.swap.swap_out_ms(Gfn(5)).unwrap().reclaimed);
    }

    #[test]
    fn partial_unregister_splits_range() {
        let r = rig();
        r.guard.register_range(Gfn(4), 6, "nic").unwrap();
        assert!(r.guard.unregister_range(Gfn(6), 2, "nic"));
        let left: Vec<_> = r
            .guard
            .ranges()
            .active_ranges()
            .iter()
            .map(|r| (r.start.0, r.count))
            .collect();
        assert_eq!(left, vec![(4, 2), (8, 2)]);
        assert!(!r.guard.ranges().contains(Gfn(7)));
    }

    #[test]
    fn dmar_outside_range_recovers() {
        let r = rig();
        populate(&r, 5);
        assert_eq!(r.guard.on_dma_access(Gfn(5), 3).unwrap(), DmaAccess::Ok);
        r.lru.untrack(Gfn(5));
        r.swap.swap_out_ms(Gfn(5)).unwrap();
        match r.guard.on_dma_access(Gfn(5), 3).unwrap() {
            DmaAccess::Recovered(ev) => assert!(ev.recovered && ev.crc_ok),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            r.space.read_mp(Gfn(5), 3).unwrap(),
            vec![0xab; r.space.mp_size()]
        );
        let s = r.guard.stats();
        assert_eq!((s.dmar_events, s.recovered, s.violations), (1, 1, 0));
    }

    #[test]
    fn corrupted_slot_reports_crc_failure() {
        let r = rig();
        populate(&r, 5);
        r.lru.untrack(Gfn(5));
        r.swap.swap_out_ms(Gfn(5)).unwrap();
        assert!(r.swap.inject_corruption(Gfn(5), 3, 17));
        match r.guard.on_dma_access(Gfn(5), 3).unwrap() {
            DmaAccess::Recovered(ev) => assert!(!ev.recovered && !ev.crc_ok),
            other => panic!("{other:?}"),
        }
        assert_eq!(r.guard.stats().crc_failures, 1);
    }
}
