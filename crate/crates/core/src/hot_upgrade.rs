// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Live upgrade through a versioned dispatch table.
//!
//! A fixed [`Shell`] owns the global table handle. Every operation reads the
//! handle once, runs entirely on that table and is counted in the table's
//! in-flight counter. Commit swaps the handle under the write lock after the
//! old table has drained, then hands each worker loop over at its next cycle
//! boundary. Engine state is shared by both tables and never copied.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::dma_guard::DmaAccess;
use crate::engine::{AccessOutcome, Engine, EngineError, EngineSnapshot};
use crate::events::EventKind;
use crate::lru::ScanReport;
use crate::mem_model::Gfn;
use crate::swap::{ReclaimDecision, ReclaimOutcome};

/// Replaceable engine logic. Every entry is always present.
pub trait EngineOps: Send + Sync + std::fmt::Debug {
    fn version(&self) -> u32;
    fn fault(&self, e: &Engine, gfn: Gfn, mp: usize) -> Result<AccessOutcome, EngineError>;
    fn dma(&self, e: &Engine, gfn: Gfn, mp: usize) -> Result<DmaAccess, EngineError>;
    fn reclaim(&self, e: &Engine, max: usize) -> (ReclaimDecision, ReclaimOutcome);
    fn scan(&self, e: &Engine, worker: usize) -> ScanReport;
    fn snapshot(&self, e: &Engine) -> EngineSnapshot;
    /// Operations counted by instrumentation, when the version has any.
    fn instrumented_ops(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug, Default)]
pub struct V1Ops;

impl EngineOps for V1Ops {
    fn version(&self) -> u32 {
        1
    }
    fn fault(&self, e: &Engine, gfn: Gfn, mp: usize) -> Result<AccessOutcome, EngineError> {
        e.access(gfn, mp)
    }
    fn dma(&self, e: &Engine, gfn: Gfn, mp: usize) -> Result<DmaAccess, EngineError> {
        e.dma_access(gfn, mp)
    }
    fn reclaim(&self, e: &Engine, max: usize) -> (ReclaimDecision, ReclaimOutcome) {
        e.reclaim_step(max)
    }
    fn scan(&self, e: &Engine, worker: usize) -> ScanReport {
        e.scan_tick(worker)
    }
    fn snapshot(&self, e: &Engine) -> EngineSnapshot {
        e.snapshot()
    }
}

/// Same behavior as v1 plus an operation counter kept in the request
/// header's reserved bytes.
#[derive(Debug, Default)]
pub struct V2Ops {
    instr_ops: AtomicU64,
}

impl V2Ops {
    fn count(&self) {
        self.instr_ops.fetch_add(1, Ordering::Relaxed);
    }
}

impl EngineOps for V2Ops {
    fn version(&self) -> u32 {
        2
    }
    fn fault(&self, e: &Engine, gfn: Gfn, mp: usize) -> Result<AccessOutcome, EngineError> {
        self.count();
        e.access(gfn, mp)
    }
    fn dma(&self, e: &Engine, gfn: Gfn, mp: usize) -> Result<DmaAccess, EngineError> {
        self.count();
        e.dma_access(gfn, mp)
    }
    fn reclaim(&self, e: &Engine, max: usize) -> (ReclaimDecision, ReclaimOutcome) {
        self.count();
        e.reclaim_step(max)
    }
    fn scan(&self, e: &Engine, worker: usize) -> ScanReport {
        self.count();
        e.scan_tick(worker)
    }
    fn snapshot(&self, e: &Engine) -> EngineSnapshot {
        e.snapshot()
    }
    fn instrumented_ops(&self) -> Option<u64> {
        Some(self.instr_ops.load(Ordering::Relaxed))
    }
}

#[derive(Debug)]
pub struct DispatchTable {
    version: u32,
    ops: Arc<dyn EngineOps>,
    layouts: Vec<LayoutDescriptor>,
    in_flight: AtomicU64,
}

impl DispatchTable {
    pub fn new(ops: Arc<dyn EngineOps>, layouts: Vec<LayoutDescriptor>) -> Self {
        Self {
            version: ops.version(),
            ops,
            layouts,
            in_flight: AtomicU64::new(0),
        }
    }

    pub fn v1() -> Self {
        Self::new(Arc::new(V1Ops), layouts_v1())
    }

    pub fn v2() -> Self {
        Self::new(Arc::new(V2Ops::default()), layouts_v2())
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn ops(&self) -> &Arc<dyn EngineOps> {
        &self.ops
    }

    pub fn layouts(&self) -> &[LayoutDescriptor] {
        &self.layouts
    }

    pub fn in_flight(&self) -> u64 {
        self.in_flight.load(Ordering::Acquire)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDesc {
    pub name: String,
    pub offset: usize,
    pub size: usize,
}

impl FieldDesc {
    pub fn new(name: &str, offset: usize, size: usize) -> Self {
        Self {
            name: name.to_string(),
            offset,
            size,
        }
    }

    fn end(&self) -> usize {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutDescriptor {
    pub name: String,
    pub size: usize,
    pub fields: Vec<FieldDesc>,
    /// (offset, length) of bytes kept for future fields.
    pub reserved: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompatReport {
    pub compatible: bool,
    pub diffs: Vec<String>,
}

impl std::fmt::Display for CompatReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.compatible {
            write!(f, "compatible")
        } else {
            write!(f, "incompatible: {}", self.diffs.join("; "))
        }
    }
}

/// Sizes must match, existing fields must keep offset and size, and new
/// fields must sit inside the old reserved bytes.
pub fn verify_compat(old: &LayoutDescriptor, new: &LayoutDescriptor) -> CompatReport {
    let mut diffs = Vec::new();
    let t = &old.name;
    if old.name != new.name {
        diffs.push(format!("{t}: renamed to {}", new.name));
    }
    if old.size != new.size {
        diffs.push(format!("{t}: size {} -> {}", old.size, new.size));
    }
    for f in &old.fields {
        match new.fields.iter().find(|n| n.name == f.name) {
            None => diffs.push(format!("{t}.{}: removed", f.name)),
            Some(n) if n != f => diffs.push(format!(
                "{t}.{}: moved {}+{} -> {}+{}",
                f.name, f.offset, f.size, n.offset, n.size
            )),
            Some(_) => {}
        }
    }
    let added: Vec<&FieldDesc> = new
        .fields
        .iter()
        .filter(|n| !old.fields.iter().any(|f| f.name == n.name))
        .collect();
    for n in &added {
        let inside = old
            .reserved
            .iter()
            .any(|&(off, len)| n.offset >= off && n.end() <= off + len);
        if !inside {
            diffs.push(format!(
                "{t}.{}: new field at {}+{} outside reserved bytes",
                n.name, n.offset, n.size
            ));
        }
    }
    for (i, a) in added.iter().enumerate() {
        for b in &added[i + 1..] {
            if a.offset < b.end() && b.offset < a.end() {
                diffs.push(format!("{t}.{} overlaps {t}.{}", a.name, b.name));
            }
        }
    }
    CompatReport {
        compatible: diffs.is_empty(),
        diffs,
    }
}

/// Checks every type of `old`; types may not disappear.
pub fn verify_all(old: &[LayoutDescriptor], new: &[LayoutDescriptor]) -> CompatReport {
    let mut diffs = Vec::new();
    for o in old {
        match new.iter().find(|n| n.name == o.name) {
            Some(n) => diffs.extend(verify_compat(o, n).diffs),
            None => diffs.push(format!("{}: type removed", o.name)),
        }
    }
    CompatReport {
        compatible: diffs.is_empty(),
        diffs,
    }
}

pub fn swap_req_layout_v1() -> LayoutDescriptor {
    LayoutDescriptor {
        name: "swap_req".into(),
        size: 64,
        fields: vec![
            FieldDesc::new("gfn", 0, 8),
            FieldDesc::new("pfn", 8, 8),
            FieldDesc::new("lock", 16, 8),
            FieldDesc::new("cancel", 24, 1),
            FieldDesc::new("state", 25, 1),
            FieldDesc::new("flags", 26, 2),
            FieldDesc::new("outstanding", 28, 4),
            FieldDesc::new("bitmap_ptrs", 32, 16),
        ],
        reserved: vec![(48, 16)],
    }
}

pub fn swap_req_layout_v2() -> LayoutDescriptor {
    let mut l = swap_req_layout_v1();
    l.fields.push(FieldDesc::new("instr_ops", 48, 4));
    l.reserved = vec![(52, 12)];
    l
}

pub fn lru_record_layout() -> LayoutDescriptor {
    LayoutDescriptor {
        name: "lru_record".into(),
        size: 32,
        fields: vec![
            FieldDesc::new("seq", 0, 8),
            FieldDesc::new("generation", 8, 8),
            FieldDesc::new("last_transition", 16, 8),
            FieldDesc::new("streak", 24, 4),
            FieldDesc::new("level", 28, 1),
        ],
        reserved: vec![(29, 3)],
    }
}

pub fn layouts_v1() -> Vec<LayoutDescriptor> {
    vec![swap_req_layout_v1(), lru_record_layout()]
}

pub fn layouts_v2() -> Vec<LayoutDescriptor> {
    vec![swap_req_layout_v2(), lru_record_layout()]
}

/// Per-worker scheduling loop entry.
pub trait WorkerLoop: Send + Sync + std::fmt::Debug {
    fn version(&self) -> u32;
}

#[derive(Debug, Clone, Copy)]
pub struct LoopEntry(pub u32);

impl WorkerLoop for LoopEntry {
    fn version(&self) -> u32 {
        self.0
    }
}

#[derive(Debug)]
struct WorkerSlot {
    current: Arc<dyn WorkerLoop>,
    pending: Option<Arc<dyn WorkerLoop>>,
    update_flag: bool,
    /// Versions entered at successive boundaries.
    history: Vec<u32>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UpgradeError {
    #[error("an upgrade is already staged")]
    AlreadyStaged,
    #[error("no staged upgrade matches ticket {0}")]
    NoTicket(u64),
    #[error("layout check failed: {0}")]
    Incompatible(CompatReport),
    #[error("expected {expected} worker loops, got {got}")]
    WorkerCount { expected: usize, got: usize },
    #[error("version {new} does not advance current version {current}")]
    Version { current: u32, new: u32 },
    #[error("{0} operations on the old table did not drain")]
    DrainTimeout(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpgradeTicket {
    pub id: u64,
    pub old_version: u32,
    pub new_version: u32,
}

#[derive(Debug)]
struct Staged {
    ticket: UpgradeTicket,
    table: DispatchTable,
    loops: Vec<Arc<dyn WorkerLoop>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpgradeReport {
    pub old_version: u32,
    pub new_version: u32,
    /// Old-table operations that were still running when commit began.
    pub drained_ops: u64,
    pub before: EngineSnapshot,
    pub after: EngineSnapshot,
    pub confirmed_workers: Vec<usize>,
    pub stragglers: Vec<usize>,
    pub drain_time: Duration,
}

impl UpgradeReport {
    pub fn state_preserved(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpgradeStatus {
    pub version: u32,
    pub staged: Option<UpgradeTicket>,
    pub worker_versions: Vec<u32>,
    pub pending_workers: Vec<usize>,
    pub in_flight: u64,
    pub commits: u64,
}

/// The fixed entry point. Holds the current table and the worker handoff
/// slots.
#[derive(Debug)]
pub struct Shell {
    engine: Arc<Engine>,
    current: RwLock<Arc<DispatchTable>>,
    staged: Mutex<Option<Staged>>,
    workers: Vec<Mutex<WorkerSlot>>,
    next_op: AtomicU64,
    next_ticket: AtomicU64,
    commits: AtomicU64,
    committing: AtomicBool,
}

impl Shell {
    pub fn new(engine: Arc<Engine>, table: DispatchTable, workers: usize) -> Self {
        let v = table.version;
        Self {
            engine,
            current: RwLock::new(Arc::new(table)),
            staged: Mutex::new(None),
            workers: (0..workers)
                .map(|_| {
                    Mutex::new(WorkerSlot {
                        current: Arc::new(LoopEntry(v)),
                        pending: None,
                        update_flag: false,
                        history: Vec::new(),
                    })
                })
                .collect(),
            next_op: AtomicU64::new(0),
            next_ticket: AtomicU64::new(1),
            commits: AtomicU64::new(0),
            committing: AtomicBool::new(false),
        }
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn version(&self) -> u32 {
        self.current.read().version
    }

    pub fn current_table(&self) -> Arc<DispatchTable> {
        self.current.read().clone()
    }

    /// Runs one operation on the table current at entry. Returns the result
    /// and the version that served it.
    pub fn invoke<R>(&self, f: impl FnOnce(&dyn EngineOps, &Engine) -> R) -> (R, u32) {
        let table = {
            let g = self.current.read();
            g.in_flight.fetch_add(1, Ordering::AcqRel);
            g.clone()
        };
        let op = self.next_op.fetch_add(1, Ordering::Relaxed);
        let version = table.version;
        let events = self.engine.events();
        events.emit(EventKind::OpBegin { op, version });
        let r = f(table.ops.as_ref(), &self.engine);
        events.emit(EventKind::OpEnd { op, version });
        table.in_flight.fetch_sub(1, Ordering::AcqRel);
        (r, version)
    }

    pub fn fault(&self, gfn: Gfn, mp: usize) -> (Result<AccessOutcome, EngineError>, u32) {
        self.invoke(|ops, e| ops.fault(e, gfn, mp))
    }

    pub fn dma(&self, gfn: Gfn, mp: usize) -> (Result<DmaAccess, EngineError>, u32) {
        self.invoke(|ops, e| ops.dma(e, gfn, mp))
    }

    pub fn reclaim(&self, max: usize) -> ((ReclaimDecision, ReclaimOutcome), u32) {
        self.invoke(|ops, e| ops.reclaim(e, max))
    }

    pub fn scan(&self, worker: usize) -> (ScanReport, u32) {
        self.invoke(|ops, e| ops.scan(e, worker))
    }

    /// Validates and parks a new table. Nothing is redirected yet.
    pub fn stage_upgrade(
        &self,
        table: DispatchTable,
        loops: Vec<Arc<dyn WorkerLoop>>,
    ) -> Result<UpgradeTicket, UpgradeError> {
        let mut staged = self.staged.lock();
        if staged.is_some() || self.committing.load(Ordering::Acquire) {
            return Err(UpgradeError::AlreadyStaged);
        }
        if loops.len() != self.workers.len() {
            return Err(UpgradeError::WorkerCount {
                expected: self.workers.len(),
                got: loops.len(),
            });
        }
        let cur = self.current_table();
        if table.version <= cur.version {
            return Err(UpgradeError::Version {
                current: cur.version,
                new: table.version,
            });
        }
        let report = verify_all(&cur.layouts, &table.layouts);
        if !report.compatible {
            return Err(UpgradeError::Incompatible(report));
        }
        let ticket = UpgradeTicket {
            id: self.next_ticket.fetch_add(1, Ordering::Relaxed),
            old_version: cur.version,
            new_version: table.version,
        };
        *staged = Some(Staged {
            ticket,
            table,
            loops,
        });
        Ok(ticket)
    }

    /// Drops a staged upgrade.
    pub fn abandon(&self, ticket: UpgradeTicket) -> bool {
        let mut staged = self.staged.lock();
        if staged.as_ref().is_some_and(|s| s.ticket == ticket) {
            *staged = None;
            true
        } else {
            false
        }
    }

    /// Redirects the global entry to the staged table once every operation
    /// on the old table has finished, then flags every worker and waits up
    /// to `confirm_wait` for them to switch loops.
    pub fn commit_upgrade(
        &self,
        ticket: UpgradeTicket,
        drain_timeout: Duration,
        confirm_wait: Duration,
    ) -> Result<UpgradeReport, UpgradeError> {
        let staged = {
            let mut s = self.staged.lock();
            match s.take() {
                Some(st) if st.ticket == ticket => {
                    self.committing.store(true, Ordering::Release);
                    st
                }
                other => {
                    *s = other;
                    return Err(UpgradeError::NoTicket(ticket.id));
                }
            }
        };
        let result = self.cut_over(staged, drain_timeout, confirm_wait);
        self.committing.store(false, Ordering::Release);
        result
    }

    fn cut_over(
        &self,
        staged: Staged,
        drain_timeout: Duration,
        confirm_wait: Duration,
    ) -> Result<UpgradeReport, UpgradeError> {
        let Staged {
            ticket,
            table,
            loops,
        } = staged;
        let start = Instant::now();
        let (drained_ops, before, after) = {
            // New operations block here until the cut is done.
            let mut cur = self.current.write();
            let drained_ops = cur.in_flight();
            while cur.in_flight() > 0 {
                if start.elapsed() > drain_timeout {
                    let left = cur.in_flight();
                    drop(cur);
                    *self.staged.lock() = Some(Staged {
                        ticket,
                        table,
                        loops,
                    });
                    return Err(UpgradeError::DrainTimeout(left));
                }
                std::thread::yield_now();
            }
            let before = cur.ops.snapshot(&self.engine);
            *cur = Arc::new(table);
            self.engine.events().emit(EventKind::UpgradeCut {
                old: ticket.old_version,
                new: ticket.new_version,
            });
            let after = cur.ops.snapshot(&self.engine);
            (drained_ops, before, after)
        };
        let drain_time = start.elapsed();
        self.commits.fetch_add(1, Ordering::Relaxed);
        for (slot, l) in self.workers.iter().zip(loops) {
            let mut s = slot.lock();
            s.pending = Some(l);
            s.update_flag = true;
        }
        let deadline = Instant::now() + confirm_wait;
        loop {
            let pending = self.pending_workers();
            if pending.is_empty() || Instant::now() >= deadline {
                let confirmed = (0..self.workers.len())
                    .filter(|w| !pending.contains(w))
                    .collect();
                return Ok(UpgradeReport {
                    old_version: ticket.old_version,
                    new_version: ticket.new_version,
                    drained_ops,
                    before,
                    after,
                    confirmed_workers: confirmed,
                    stragglers: pending,
                    drain_time,
                });
            }
            std::thread::sleep(Duration::from_micros(50));
        }
    }

    /// Called by worker `w` at every cycle boundary. Returns the loop the
    /// worker must run for the next cycle.
    pub fn boundary(&self, w: usize) -> Arc<dyn WorkerLoop> {
        let mut s = self.workers[w].lock();
        if s.update_flag {
            if let Some(next) = s.pending.take() {
                s.current = next;
            }
            s.update_flag = false;
        }
        let v = s.current.version();
        s.history.push(v);
        s.current.clone()
    }

    /// Versions entered by worker `w` at each boundary so far.
    pub fn worker_history(&self, w: usize) -> Vec<u32> {
        self.workers[w].lock().history.clone()
    }

    pub fn pending_workers(&self) -> Vec<usize> {
        self.workers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.lock().update_flag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn status(&self) -> UpgradeStatus {
        let cur = self.current_table();
        UpgradeStatus {
            version: cur.version,
            staged: self.staged.lock().as_ref().map(|s| s.ticket),
            worker_versions: self
                .workers
                .iter()
                .map(|s| s.lock().current.version())
                .collect(),
            pending_workers: self.pending_workers(),
            in_flight: cur.in_flight(),
            commits: self.commits.load(Ordering::Relaxed),
        }
    }
}

/// Checks an event log for a clean version cut: every operation begins and
/// ends on one version, no old-version operation begins after the cut and
/// no new-version operation begins before it. Returns per-version operation
/// counts.
pub fn check_version_cut(
    events: &[crate::events::Event],
    old: u32,
    new: u32,
) -> Result<BTreeMap<u32, u64>, String> {
    let mut begun: BTreeMap<u64, u32> = BTreeMap::new();
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cut_seen = false;
    for ev in events {
        match &ev.kind {
            EventKind::UpgradeCut { old: o, new: n } if *o == old && *n == new => {
                if cut_seen {
                    return Err("two cuts for one upgrade".into());
                }
                if !begun.is_empty() {
                    return Err(format!("{} operations still open at the cut", begun.len()));
                }
                cut_seen = true;
            }
            EventKind::OpBegin { op, version } => {
                if *version == old && cut_seen {
                    return Err(format!("op {op} began on v{old} after the cut"));
                }
                if *version == new && !cut_seen {
                    return Err(format!("op {op} began on v{new} before the cut"));
                }
                begun.insert(*op, *version);
            }
            EventKind::OpEnd { op, version } => match begun.remove(op) {
                Some(v) if v == *version => *counts.entry(v).or_default() += 1,
                Some(v) => return Err(format!("op {op} began on v{v} and ended on v{version}")),
                None => return Err(format!("op {op} ended without beginning")),
            },
            _ => {}
        }
    }
    if !begun.is_empty() {
        return Err(format!("{} operations never finished", begun.len()));
    }
    if !cut_seen {
        return Err("no cut recorded".into());
    }
    Ok(counts)
}
