// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Multi-level hot/cold tracking of memory sections.
//!
//! Levels run from hot (index 0) to cold (index `levels - 1`); with the
//! default depth of six they are hot, hot_mid, active, inactive, cold_mid and
//! cold. Each level keeps its members in arrival order, so the head of the
//! cold level is the coldest section.
//!
//! Access harvesting only raises a per-MS flag. Levels change during
//! [`Lru::scan_tick`]: an accessed MS steps one level toward hot, an MS that
//! has gone `stabilize_scans` consecutive scans without access steps one
//! level toward cold on every further unaccessed scan. No scan moves an MS
//! by more than one level.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::dma_guard::DmaRanges;
use crate::mem_model::Gfn;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LruError {
    #[error("gfn {0} belongs to the pinned metadata window")]
    Pinned(Gfn),
    #[error("gfn {0} lies in an active DMA range")]
    DmaRegistered(Gfn),
    #[error("gfn {0} outside tracked capacity")]
    OutOfRange(Gfn),
    #[error("invalid lru configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LruConfig {
    /// Even, at least 4.
    pub levels: usize,
    pub stabilize_scans: u32,
    pub workers: usize,
    /// Bound on a worker's scan cache.
    pub batch: usize,
}

impl Default for LruConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            stabilize_scans: 2,
            workers: 1,
            batch: 64,
        }
    }
}

impl LruConfig {
    pub fn validate(&self) -> Result<(), LruError> {
        if self.levels < 4 || !self.levels.is_multiple_of(2) {
            return Err(LruError::Config(format!(
                "levels must be even and >= 4, got {}",
                self.levels
            )));
        }
        if self.workers == 0 || self.batch == 0 {
            return Err(LruError::Config(
                "workers and batch must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn hot(&self) -> usize {
        0
    }

    /// Entry level for newly tracked sections.
    pub fn active(&self) -> usize {
        self.levels / 2 - 1
    }

    pub fn inactive(&self) -> usize {
        self.levels / 2
    }

    pub fn cold_mid(&self) -> usize {
        self.levels - 2
    }

    pub fn cold(&self) -> usize {
        self.levels - 1
    }

    pub fn is_cold_half(&self, level: usize) -> bool {
        level >= self.levels / 2
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub worker: usize,
    pub scan_index: u64,
    pub scanned: usize,
    pub promotions: usize,
    pub demotions: usize,
    pub level_sizes: Vec<usize>,
}

/// Worker-local buffer of pending scans and results.
#[derive(Debug, Default)]
pub struct ScanCache {
    pub worker_id: usize,
    pub pending_scan_batch: Vec<(Gfn, u64)>,
    pub pending_results: Vec<(Gfn, u64, bool)>,
    scans: u64,
}

#[derive(Debug, Clone, Copy)]
struct Record {
    level: usize,
    seq: u64,
    generation: u64,
    streak: u32,
    last_transition_scan: u64,
}

#[derive(Debug)]
struct Sets {
    levels: Vec<BTreeMap<u64, Gfn>>,
    records: Vec<Option<Record>>,
    next_seq: u64,
    next_generation: u64,
    tracked: usize,
}

impl Sets {
    fn append(&mut self, gfn: Gfn, level: usize) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.levels[level].insert(seq, gfn);
        seq
    }

    fn remove(&mut self, gfn: Gfn) -> Option<Record> {
        let rec = self.records[gfn.0 as usize].take()?;
        self.levels[rec.level].remove(&rec.seq);
        self.tracked -= 1;
        Some(rec)
    }

    fn move_to(&mut self, gfn: Gfn, level: usize, scan: u64) {
        let rec = self.records[gfn.0 as usize].as_mut().expect("tracked");
        let old = *rec;
        self.levels[old.level].remove(&old.seq);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.levels[level].insert(seq, gfn);
        let rec = self.records[gfn.0 as usize].as_mut().expect("tracked");
        rec.level = level;
        rec.seq = seq;
        rec.last_transition_scan = scan;
    }
}

#[derive(Debug)]
pub struct Lru {
    cfg: LruConfig,
    pinned_ms: u64,
    dma: Arc<DmaRanges>,
    sets: Mutex<Sets>,
    accessed: Box<[AtomicBool]>,
    tracked: Box<[AtomicBool]>,
    caches: Box<[Mutex<ScanCache>]>,
}

impl Lru {
    /// `capacity` is the number of guest sections; the first `pinned_ms`
    /// are never tracked.
    pub fn new(
        cfg: LruConfig,
        capacity: u64,
        pinned_ms: u64,
        dma: Arc<DmaRanges>,
    ) -> Result<Self, LruError> {
        cfg.validate()?;
        let n = capacity as usize;
        Ok(Self {
            cfg,
            pinned_ms,
            dma,
            sets: Mutex::new(Sets {
                levels: vec![BTreeMap::new(); cfg.levels],
                records: vec![None; n],
                next_seq: 0,
                next_generation: 0,
                tracked: 0,
            }),
            accessed: (0..n).map(|_| AtomicBool::new(false)).collect(),
            tracked: (0..n).map(|_| AtomicBool::new(false)).collect(),
            caches: (0..cfg.workers)
                .map(|w| {
                    Mutex::new(ScanCache {
                        worker_id: w,
                        ..Default::default()
                    })
                })
                .collect(),
        })
    }

    pub fn config(&self) -> &LruConfig {
        &self.cfg
    }

    fn check_range(&self, gfn: Gfn) -> Result<(), LruError> {
        if gfn.0 as usize >= self.accessed.len() {
            return Err(LruError::OutOfRange(gfn));
        }
        Ok(())
    }

    /// Inserts a resident MS at the tail of `active`. Tracking twice is a
    /// no-op.
    pub fn track(&self, gfn: Gfn) -> Result<(), LruError> {
        self.check_range(gfn)?;
        if gfn.0 < self.pinned_ms {
            return Err(LruError::Pinned(gfn));
        }
        // Held across the insert so a concurrent registration either sees
        // this MS tracked or we see its range.
        let dma = self.dma.read();
        if dma.contains(gfn) {
            return Err(LruError::DmaRegistered(gfn));
        }
        let mut sets = self.sets.lock();
        if sets.records[gfn.0 as usize].is_some() {
            return Ok(());
        }
        let level = self.cfg.active();
        let seq = sets.append(gfn, level);
        let generation = sets.next_generation;
        sets.next_generation += 1;
        sets.records[gfn.0 as usize] = Some(Record {
            level,
            seq,
            generation,
            streak: 0,
            last_transition_scan: 0,
        });
        sets.tracked += 1;
        self.accessed[gfn.0 as usize].store(false, Ordering::Release);
        self.tracked[gfn.0 as usize].store(true, Ordering::Release);
        Ok(())
    }

    pub fn untrack(&self, gfn: Gfn) -> bool {
        if self.check_range(gfn).is_err() {
            return false;
        }
        let mut sets = self.sets.lock();
        let removed = sets.remove(gfn).is_some();
        if removed {
            self.tracked[gfn.0 as usize].store(false, Ordering::Release);
        }
        removed
    }

    /// Records an access. Untracked sections are ignored.
    pub fn harvest_access(&self, gfn: Gfn) {
        let i = gfn.0 as usize;
        if i < self.accessed.len() && self.tracked[i].load(Ordering::Acquire) {
            self.accessed[i].store(true, Ordering::Release);
        }
    }

    pub fn accessed_flag(&self, gfn: Gfn) -> bool {
        self.accessed
            .get(gfn.0 as usize)
            .is_some_and(|f| f.load(Ordering::Acquire))
    }

    /// Scans this worker's shard (`gfn % workers == worker`).
    pub fn scan_tick(&self, worker: usize) -> ScanReport {
        assert!(worker < self.cfg.workers, "worker {worker} out of range");
        let mut cache = self.caches[worker].lock();
        cache.scans += 1;
        let scan = cache.scans;
        let workers = self.cfg.workers as u64;

        let shard: Vec<(Gfn, u64)> = {
            let sets = self.sets.lock();
            sets.levels
                .iter()
                .flat_map(|lvl| lvl.values())
                .filter(|g| g.0 % workers == worker as u64)
                .map(|g| (*g, sets.records[g.0 as usize].expect("tracked").generation))
                .collect()
        };

        let mut report = ScanReport {
            worker,
            scan_index: scan,
            ..Default::default()
        };
        for chunk in shard.chunks(self.cfg.batch) {
            cache.pending_scan_batch.clear();
            cache.pending_scan_batch.extend_from_slice(chunk);
            let results: Vec<_> = cache
                .pending_scan_batch
                .iter()
                .map(|&(g, generation)| {
                    (
                        g,
                        generation,
                        self.accessed[g.0 as usize].swap(false, Ordering::AcqRel),
                    )
                })
                .collect();
            cache.pending_results = results;

            let mut sets = self.sets.lock();
            for &(gfn, generation, accessed) in &cache.pending_results {
                let Some(rec) = sets.records[gfn.0 as usize].as_mut() else {
                    continue;
                };
                if rec.generation != generation {
                    continue;
                }
                report.scanned += 1;
                let level = rec.level;
                let target = if accessed {
                    rec.streak = 0;
                    (level > 0).then(|| level - 1)
                } else {
                    rec.streak = rec.streak.saturating_add(1);
                    (rec.streak >= self.cfg.stabilize_scans && level < self.cfg.cold())
                        .then(|| level + 1)
                };
                if let Some(t) = target {
                    sets.move_to(gfn, t, scan);
                    if t < level {
                        report.promotions += 1;
                    } else {
                        report.demotions += 1;
                    }
                }
            }
            cache.pending_results.clear();
        }
        cache.pending_scan_batch.clear();
        report.level_sizes = self.level_sizes();
        report
    }

    /// Takes up to `n` sections from the head of `cold`, falling back to
    /// `cold_mid`. Returned sections are no longer tracked.
    pub fn coldest(&self, n: usize) -> Vec<Gfn> {
        let mut out = Vec::with_capacity(n);
        let mut sets = self.sets.lock();
        for level in [self.cfg.cold(), self.cfg.cold_mid()] {
            while out.len() < n {
                let Some((_, gfn)) = sets.levels[level].first_key_value().map(|(k, g)| (*k, *g))
                else {
                    break;
                };
                sets.remove(gfn);
                self.tracked[gfn.0 as usize].store(false, Ordering::Release);
                out.push(gfn);
            }
        }
        out
    }

    /// Number of sections `coldest` could hand out right now.
    pub fn cold_supply(&self) -> usize {
        let sets = self.sets.lock();
        sets.levels[self.cfg.cold()].len() + sets.levels[self.cfg.cold_mid()].len()
    }

    pub fn level_of(&self, gfn: Gfn) -> Option<usize> {
        self.sets
            .lock()
            .records
            .get(gfn.0 as usize)
            .copied()
            .flatten()
            .map(|r| r.level)
    }

    /// Scan index at which the MS last changed level.
    pub fn last_transition(&self, gfn: Gfn) -> Option<u64> {
        self.sets
            .lock()
            .records
            .get(gfn.0 as usize)
            .copied()
            .flatten()
            .map(|r| r.last_transition_scan)
    }

    pub fn is_tracked(&self, gfn: Gfn) -> bool {
        self.level_of(gfn).is_some()
    }

    /// Members of one level, head (oldest arrival) first.
    pub fn members(&self, level: usize) -> Vec<Gfn> {
        self.sets.lock().levels[level].values().copied().collect()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.sets.lock().levels.iter().map(|l| l.len()).collect()
    }

    pub fn tracked_count(&self) -> usize {
        self.sets.lock().tracked
    }

    pub fn cold_half_count(&self) -> usize {
        let sets = self.sets.lock();
        sets.levels[self.cfg.levels / 2..]
            .iter()
            .map(|l| l.len())
            .sum()
    }

    pub fn tracked_ids(&self) -> Vec<Gfn> {
        let sets = self.sets.lock();
        sets.levels
            .iter()
            .flat_map(|l| l.values().copied())
            .collect()
    }

    /// Every tracked MS sits in exactly one level.
    pub fn check_partition(&self) -> bool {
        let sets = self.sets.lock();
        let total: usize = sets.levels.iter().map(|l| l.len()).sum();
        let recs = sets.records.iter().flatten().count();
        if total != sets.tracked || recs != sets.tracked {
            return false;
        }
        sets.levels.iter().enumerate().all(|(i, lvl)| {
            lvl.iter().all(|(seq, g)| {
                matches!(sets.records[g.0 as usize], Some(r) if r.level == i && r.seq == *seq)
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lru(n: u64) -> Lru {
        Lru::new(LruConfig::default(), n, 0, Arc::new(DmaRanges::default())).unwrap()
    }

    #[test]
    fn track_places_at_active_tail_once() {
        let l = lru(8);
        l.track(Gfn(3)).unwrap();
        l.track(Gfn(1)).unwrap();
        l.track(Gfn(3)).unwrap();
        assert_eq!(l.members(2), vec![Gfn(3), Gfn(1)]);
        assert_eq!(l.tracked_count(), 2);
        assert!(l.check_partition());
    }

    #[test]
    fn pinned_and_dma_are_rejected() {
        let dma = Arc::new(DmaRanges::default());
        let l = Lru::new(LruConfig::default(), 16, 2, dma.clone()).unwrap();
        assert_eq!(l.track(Gfn(1)), Err(LruError::Pinned(Gfn(1))));
        dma.activate_for_test(Gfn(5), 2, "nic");
        assert_eq!(l.track(Gfn(6)), Err(LruError::DmaRegistered(Gfn(6))));
        l.track(Gfn(7)).unwrap();
        assert_eq!(l.track(Gfn(99)), Err(LruError::OutOfRange(Gfn(99))));
    }

    #[test]
    fn access_smooths_until_scan() {
        let l = lru(4);
        l.track(Gfn(0)).unwrap();
        for _ in 0..6 {
            l.scan_tick(0);
        }
        assert_eq!(l.level_of(Gfn(0)), Some(5));
        l.harvest_access(Gfn(0));
        assert!(l.accessed_flag(Gfn(0)));
        assert_eq!(l.level_of(Gfn(0)), Some(5));
        let r = l.scan_tick(0);
        assert_eq!(r.promotions, 1);
        assert_eq!(l.level_of(Gfn(0)), Some(4));
        assert!(!l.accessed_flag(Gfn(0)));
    }

    #[test]
    fn hot_touch_keeps_level() {
        let l = lru(4);
        l.track(Gfn(2)).unwrap();
        for _ in 0..3 {
            l.harvest_access(Gfn(2));
            l.scan_tick(0);
        }
        assert_eq!(l.level_of(Gfn(2)), Some(0));
        l.harvest_access(Gfn(2));
        l.scan_tick(0);
        assert_eq!(l.level_of(Gfn(2)), Some(0));
    }

    #[test]
    fn untracked_access_is_ignored() {
        let l = lru(4);
        l.harvest_access(Gfn(1));
        assert!(!l.accessed_flag(Gfn(1)));
        l.harvest_access(Gfn(100));
    }

    #[test]
    fn stabilization_delay_then_stepwise_demotion() {
        let l = lru(4);
        l.track(Gfn(0)).unwrap();
        l.scan_tick(0);
        assert_eq!(l.level_of(Gfn(0)), Some(2));
        l.scan_tick(0);
        assert_eq!(l.level_of(Gfn(0)), Some(3));
        l.scan_tick(0);
        assert_eq!(l.level_of(Gfn(0)), Some(4));
        l.scan_tick(0);
        assert_eq!(l.level_of(Gfn(0)), Some(5));
        assert_eq!(l.last_transition(Gfn(0)), Some(4));
    }

    #[test]
    fn fixpoint_preserves_arrival_order() {
        let l = lru(16);
        let order = [9u64, 2, 14, 0, 7, 3];
        for g in order {
            l.track(Gfn(g)).unwrap();
        }
        for _ in 0..10 {
            l.scan_tick(0);
        }
        assert_eq!(
            l.members(5),
            order.iter().map(|&g| Gfn(g)).collect::<Vec<_>>()
        );
        assert_eq!(l.cold_half_count(), 6);
    }

    #[test]
    fn coldest_takes_head_then_cold_mid() {
        let l = lru(8);
        for g in 0..3 {
            l.track(Gfn(g)).unwrap();
        }
        for _ in 0..4 {
            l.scan_tick(0);
        }
        assert_eq!(l.members(5), vec![Gfn(0), Gfn(1), Gfn(2)]);
        assert_eq!(l.coldest(2), vec![Gfn(0), Gfn(1)]);
        assert_eq!(l.coldest(0), vec![]);

        let l = lru(8);
        l.track(Gfn(4)).unwrap();
        for _ in 0..3 {
            l.scan_tick(0);
        }
        assert_eq!(l.level_of(Gfn(4)), Some(4));
        assert_eq!(l.coldest(2), vec![Gfn(4)]);
        assert!(!l.is_tracked(Gfn(4)));
        assert!(l.check_partition());
    }

    #[test]
    fn sharded_workers_only_touch_their_shard() {
        let cfg = LruConfig {
            workers: 2,
            ..Default::default()
        };
        let l = Lru::new(cfg, 8, 0, Arc::new(DmaRanges::default())).unwrap();
        for g in 0..4 {
            l.track(Gfn(g)).unwrap();
        }
        l.scan_tick(0);
        l.scan_tick(0);
        assert_eq!(l.level_of(Gfn(0)), Some(3));
        assert_eq!(l.level_of(Gfn(1)), Some(2));
        assert_eq!(l.level_of(Gfn(2)), Some(3));
    }

    #[test]
    fn small_batches_give_same_result() {
        let cfg = LruConfig {
            batch: 3,
            ..Default::default()
        };
        let a = Lru::new(cfg, 64, 0, Arc::new(DmaRanges::default())).unwrap();
        let b = lru(64);
        for g in 0..40 {
            a.track(Gfn(g)).unwrap();
            b.track(Gfn(g)).unwrap();
        }
        for round in 0..8u64 {
            for g in (0..40).filter(|g| (g + round) % 5 == 0) {
                a.harvest_access(Gfn(g));
                b.harvest_access(Gfn(g));
            }
            a.scan_tick(0);
            b.scan_tick(0);
        }
        for lvl in 0..6 {
            assert_eq!(a.members(lvl), b.members(lvl));
        }
    }

    #[test]
    fn bad_config_rejected() {
        let dma = Arc::new(DmaRanges::default());
        let cfg = LruConfig {
            levels: 5,
            ..Default::default()
        };
        assert!(Lru::new(cfg, 4, 0, dma).is_err());
    }
}
