// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Sequenced event log shared by all engine modules.
//!
//! Events are appended while the emitting task still holds the locks that
//! make the event meaningful, so the sequence number order is a valid
//! linearization for the test oracles.

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;

use crate::backend::PageSource;
use crate::mem_model::{Gfn, Pfn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    Cancelled,
    DmaRegistered,
    BackendFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReclaimState {
    Idle,
    Reclaiming,
}

impl fmt::Display for ReclaimState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReclaimState::Idle => f.write_str("idle"),
            ReclaimState::Reclaiming => f.write_str("reclaiming"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Populate {
        gfn: Gfn,
        pfn: Pfn,
    },
    Split {
        gfn: Gfn,
    },
    MpOut {
        gfn: Gfn,
        mp: usize,
    },
    Reclaim {
        gfn: Gfn,
        pfn: Pfn,
    },
    SwapOutAborted {
        gfn: Gfn,
        reason: AbortReason,
        swapped: usize,
    },
    AllocMs {
        gfn: Gfn,
        pfn: Pfn,
    },
    MpIn {
        gfn: Gfn,
        mp: usize,
        source: PageSource,
    },
    Merge {
        gfn: Gfn,
        pfn: Pfn,
    },
    Quarantine {
        gfn: Gfn,
        mp: usize,
    },
    Oom {
        gfn: Gfn,
    },
    Watermark {
        from: ReclaimState,
        to: ReclaimState,
        free_ms: u64,
    },
    DmaActivate {
        start: Gfn,
        count: u64,
        owner: String,
    },
    DmaDeactivate {
        start: Gfn,
        count: u64,
    },
    Dmar {
        gfn: Gfn,
        mp: usize,
        recovered: bool,
        crc_ok: bool,
    },
    DmaViolation {
        gfn: Gfn,
        mp: usize,
    },
    OpBegin {
        op: u64,
        version: u32,
    },
    OpEnd {
        op: u64,
        version: u32,
    },
    UpgradeCut {
        old: u32,
        new: u32,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Populate { .. } => "populate",
            EventKind::Split { .. } => "split",
            EventKind::MpOut { .. } => "mp_out",
            EventKind::Reclaim { .. } => "reclaim",
            EventKind::SwapOutAborted { .. } => "swap_out_aborted",
            EventKind::AllocMs { .. } => "alloc_ms",
            EventKind::MpIn { .. } => "mp_in",
            EventKind::Merge { .. } => "merge",
            EventKind::Quarantine { .. } => "quarantine",
            EventKind::Oom { .. } => "oom",
            EventKind::Watermark { .. } => "watermark",
            EventKind::DmaActivate { .. } => "dma_activate",
            EventKind::DmaDeactivate { .. } => "dma_deactivate",
            EventKind::Dmar { .. } => "dmar",
            EventKind::DmaViolation { .. } => "dma_violation",
            EventKind::OpBegin { .. } => "op_begin",
            EventKind::OpEnd { .. } => "op_end",
            EventKind::UpgradeCut { .. } => "upgrade_cut",
        }
    }

    /// The MS an event refers to, if any.
    pub fn gfn(&self) -> Option<Gfn> {
        match *self {
            EventKind::Populate { gfn, .. }
            | EventKind::Split { gfn }
            | EventKind::MpOut { gfn, .. }
            | EventKind::Reclaim { gfn, .. }
            | EventKind::SwapOutAborted { gfn, .. }
            | EventKind::AllocMs { gfn, .. }
            | EventKind::MpIn { gfn, .. }
            | EventKind::Merge { gfn, .. }
            | EventKind::Quarantine { gfn, .. }
            | EventKind::Oom { gfn }
            | EventKind::Dmar { gfn, .. }
            | EventKind::DmaViolation { gfn, .. } => Some(gfn),
            EventKind::DmaActivate { start, .. } | EventKind::DmaDeactivate { start, .. } => {
                Some(start)
            }
            _ => None,
        }
    }

    pub fn mp(&self) -> Option<usize> {
        match *self {
            EventKind::MpOut { mp, .. }
            | EventKind::MpIn { mp, .. }
            | EventKind::Quarantine { mp, .. }
            | EventKind::Dmar { mp, .. }
            | EventKind::DmaViolation { mp, .. } => Some(mp),
            _ => None,
        }
    }

    /// Free-form detail column for CSV export.
    pub fn detail(&self) -> String {
        match self {
            EventKind::Populate { pfn, .. }
            | EventKind::Reclaim { pfn, .. }
            | EventKind::AllocMs { pfn, .. }
            | EventKind::Merge { pfn, .. } => format!("pfn={pfn}"),
            EventKind::SwapOutAborted {
                reason, swapped, ..
            } => {
                format!("reason={reason:?};swapped={swapped}")
            }
            EventKind::MpIn { source, .. } => format!("source={source}"),
            EventKind::Watermark { from, to, free_ms } => {
                format!("from={from};to={to};free_ms={free_ms}")
            }
            EventKind::DmaActivate { count, owner, .. } => format!("count={count};owner={owner}"),
            EventKind::DmaDeactivate { count, .. } => format!("count={count}"),
            EventKind::Dmar {
                recovered, crc_ok, ..
            } => {
                format!("recovered={recovered};crc_ok={crc_ok}")
            }
            EventKind::OpBegin { op, version } | EventKind::OpEnd { op, version } => {
                format!("op={op};version={version}")
            }
            EventKind::UpgradeCut { old, new } => format!("old={old};new={new}"),
            _ => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub seq: u64,
    pub time_ns: u64,
    pub kind: EventKind,
}

#[derive(Debug)]
pub struct EventLog {
    enabled: AtomicBool,
    seq: AtomicU64,
    now_ns: AtomicU64,
    entries: Mutex<Vec<Event>>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new(true)
    }
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled: AtomicBool::new(enabled),
            seq: AtomicU64::new(0),
            now_ns: AtomicU64::new(0),
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Release);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Acquire)
    }

    /// Simulated clock stamped onto subsequent events.
    pub fn set_time(&self, ns: u64) {
        self.now_ns.store(ns, Ordering::Release);
    }

    pub fn time(&self) -> u64 {
        self.now_ns.load(Ordering::Acquire)
    }

    pub fn emit(&self, kind: EventKind) {
        if !self.is_enabled() {
            return;
        }
        let mut entries = self.entries.lock();
        // Sequence is assigned under the lock so vector order == seq order.
        let seq = self.seq.fetch_add(1, Ordering::AcqRel);
        entries.push(Event {
            seq,
            time_ns: self.time(),
            kind,
        });
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.entries.lock().clone()
    }

    pub fn drain(&self) -> Vec<Event> {
        std::mem::take(&mut *self.entries.lock())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.entries.lock().iter().filter(|e| pred(&e.kind)).count()
    }
}
