// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Per-MS swap request entity.

use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};

use parking_lot::{Condvar, Mutex, RwLock};

use crate::backend::{BackendSlot, PageSource, CRC_BYTES};
use crate::bitmap::AtomicBitmap;
use crate::mem_model::{Gfn, MpoolBlock, Pfn};

/// Fixed header of a request in the metadata accounting model: identity,
/// lock word, cancel flag, state, counters and tree linkage.
pub const REQ_HEADER_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsState {
    Resident = 0,
    Splitting = 1,
    PartiallySwapped = 2,
    FullySwapped = 3,
    Refilling = 4,
}

impl MsState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => MsState::Resident,
            1 => MsState::Splitting,
            2 => MsState::PartiallySwapped,
            3 => MsState::FullySwapped,
            4 => MsState::Refilling,
            _ => unreachable!("bad ms state {v}"),
        }
    }
}

#[derive(Debug)]
pub struct SwapReq {
    pub(super) gfn: Gfn,
    /// Writer: active task. Readers: fault-ins.
    pub(super) lock: RwLock<()>,
    pub(super) cancel: AtomicBool,
    pub(super) writer_active: AtomicBool,
    pub(super) swapped_out: AtomicBitmap,
    pub(super) swapping_in: AtomicBitmap,
    pub(super) quarantined: AtomicBitmap,
    /// Kind of the slot last written for each MP; set at swap-out.
    pub(super) zero_page: AtomicBitmap,
    /// popcount(swapped_out), decremented by the restoring task.
    pub(super) outstanding: AtomicUsize,
    state: AtomicU8,
    pub(super) frame: Mutex<Option<Pfn>>,
    pub(super) slots: Mutex<Box<[Option<BackendSlot>]>>,
    pub(super) retired: AtomicBool,
    pub(super) meta: Mutex<Option<MpoolBlock>>,
    pub(super) done: Mutex<()>,
    pub(super) done_cv: Condvar,
}

impl SwapReq {
    pub(super) fn new(gfn: Gfn, pfn: Pfn, mps: usize, meta: MpoolBlock) -> Self {
        Self {
            gfn,
            lock: RwLock::new(()),
            cancel: AtomicBool::new(false),
            writer_active: AtomicBool::new(false),
            swapped_out: AtomicBitmap::new(mps),
            swapping_in: AtomicBitmap::new(mps),
            quarantined: AtomicBitmap::new(mps),
            zero_page: AtomicBitmap::new(mps),
            outstanding: AtomicUsize::new(0),
            state: AtomicU8::new(MsState::Resident as u8),
            frame: Mutex::new(Some(pfn)),
            slots: Mutex::new((0..mps).map(|_| None).collect()),
            retired: AtomicBool::new(false),
            meta: Mutex::new(Some(meta)),
            done: Mutex::new(()),
            done_cv: Condvar::new(),
        }
    }

    /// Accounted size of one request: header, three per-MP bitmaps and a
    /// CRC per MP.
    pub fn metadata_bytes(mps: usize) -> u64 {
        REQ_HEADER_BYTES + 3 * (mps.div_ceil(8) as u64) + CRC_BYTES * mps as u64
    }

    pub fn gfn(&self) -> Gfn {
        self.gfn
    }

    pub fn state(&self) -> MsState {
        MsState::from_u8(self.state.load(Ordering::Acquire))
    }

    pub(super) fn set_state(&self, s: MsState) {
        self.state.store(s as u8, Ordering::Release);
    }

    pub fn pfn(&self) -> Option<Pfn> {
        *self.frame.lock()
    }

    pub fn is_retired(&self) -> bool {
        self.retired.load(Ordering::Acquire)
    }

    pub fn swapped_out_count(&self) -> usize {
        self.swapped_out.count_ones()
    }

    pub fn is_swapped_out(&self, mp: usize) -> bool {
        self.swapped_out.get(mp)
    }

    pub fn is_quarantined(&self, mp: usize) -> bool {
        self.quarantined.get(mp)
    }

    pub fn swapped_out_bits(&self) -> Vec<u64> {
        self.swapped_out.snapshot()
    }

    pub fn swapping_in_bits(&self) -> Vec<u64> {
        self.swapping_in.snapshot()
    }

    pub(super) fn source_of(&self, mp: usize) -> PageSource {
        if self.zero_page.get(mp) {
            PageSource::Zero
        } else {
            PageSource::Compressed
        }
    }

    /// Wakes fault-ins waiting on any MP of this section.
    pub(super) fn notify(&self) {
        let _g = self.done.lock();
        self.done_cv.notify_all();
    }

    pub(super) fn wait_swap_in(&self, mp: usize) {
        let mut g = self.done.lock();
        while self.swapping_in.get(mp) {
            self.done_cv.wait(&mut g);
        }
    }

    /// Quiescent-state invariants. Must not be called while tasks run on
    /// this request.
    pub fn check_invariants(&self) -> Result<(), String> {
        let live = self.slots.lock().iter().filter(|s| s.is_some()).count();
        let out = self.swapped_out.count_ones();
        if out != live {
            return Err(format!(
                "gfn {}: {out} swapped-out bits but {live} live slots",
                self.gfn
            ));
        }
        if out != self.outstanding.load(Ordering::Acquire) {
            return Err(format!(
                "gfn {}: outstanding counter disagrees with bitmap",
                self.gfn
            ));
        }
        let so = self.swapped_out.snapshot();
        let si = self.swapping_in.snapshot();
        if so.iter().zip(&si).any(|(o, i)| i & !o != 0) {
            return Err(format!(
                "gfn {}: swapping-in bit without swapped-out bit",
                self.gfn
            ));
        }
        let full = self.swapped_out.is_full();
        let no_frame = self.pfn().is_none();
        if (self.state() == MsState::FullySwapped) != (full && no_frame) {
            return Err(format!(
                "gfn {}: state {:?} with full={full} frameless={no_frame}",
                self.gfn,
                self.state()
            ));
        }
        Ok(())
    }
}
