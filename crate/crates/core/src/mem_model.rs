// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Simulated guest-physical memory.
//!
//! The mapping table is the second-stage (EPT) analog: one entry per guest
//! MS, either a huge mapping onto one physical MS, a split table of per-MP
//! mappings, or not present. The IOMMU view reads the same table, so splits
//! and merges always apply to both.
//!
//! The first `metadata_ms` guest MSes form the metadata pool window. They are
//! identity mapped (guest frame == physical frame), pinned, and never handed
//! to the LRU or the swap engine.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// Guest frame number of a memory section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Gfn(pub u64);

/// Physical frame number of a memory section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Pfn(pub u64);

impl fmt::Display for Gfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Pfn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type Result<T> = std::result::Result<T, MemError>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("mpool reservation {reservation} exceeds physical capacity {capacity}")]
    ReservationTooLarge { reservation: u64, capacity: u64 },
    #[error("gfn {0} outside virtual capacity")]
    AddressOutOfRange(Gfn),
    #[error("mp offset {mp} outside section of {mps} pages")]
    MpOutOfRange { mp: usize, mps: usize },
    #[error("gfn {gfn}: expected {expected} mapping, found {found}")]
    State {
        gfn: Gfn,
        expected: &'static str,
        found: &'static str,
    },
    #[error("gfn {gfn}: mp {mp} is not resident")]
    NotResident { gfn: Gfn, mp: usize },
    #[error("gfn {gfn}: mp {mp} maps physical section {found}, expected {expected}")]
    Scattered {
        gfn: Gfn,
        mp: usize,
        expected: Pfn,
        found: Pfn,
    },
    #[error("no free physical memory section")]
    OutOfMemory,
    #[error("mpool exhausted: requested {requested} bytes with {used} of {reservation} in use")]
    MpoolExhausted {
        requested: u64,
        used: u64,
        reservation: u64,
    },
    #[error("gfn {0} belongs to the pinned metadata window")]
    Pinned(Gfn),
    #[error("page buffer of {len} bytes, expected {expected}")]
    BadPageLength { len: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub ms_size: u64,
    pub mp_size: u64,
    pub phys_ms_count: u64,
    pub virt_extra_ms_count: u64,
}

impl Geometry {
    pub const PRODUCTION_MS_SIZE: u64 = 2 * MIB;
    pub const SCALED_MS_SIZE: u64 = 64 * KIB;
    pub const MP_SIZE: u64 = 4 * KIB;

    /// 2 MiB sections of 4 KiB pages.
    pub fn production(phys_ms_count: u64, virt_extra_ms_count: u64) -> Self {
        Self {
            ms_size: Self::PRODUCTION_MS_SIZE,
            mp_size: Self::MP_SIZE,
            phys_ms_count,
            virt_extra_ms_count,
        }
    }

    /// 64 KiB sections of 4 KiB pages (16 MPs per MS).
    pub fn scaled(phys_ms_count: u64, virt_extra_ms_count: u64) -> Self {
        Self {
            ms_size: Self::SCALED_MS_SIZE,
            mp_size: Self::MP_SIZE,
            phys_ms_count,
            virt_extra_ms_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MemError::InvalidGeometry(m.to_string()));
        if !self.ms_size.is_power_of_two() || !self.mp_size.is_power_of_two() {
            return bad("section and page sizes must be powers of two");
        }
        if self.ms_size < self.mp_size {
            return bad("section smaller than page");
        }
        if self.phys_ms_count == 0 {
            return bad("no physical sections");
        }
        if self.mps_per_ms() > u32::MAX as usize {
            return bad("too many pages per section");
        }
        Ok(())
    }

    pub fn mps_per_ms(&self) -> usize {
        (self.ms_size / self.mp_size) as usize
    }

    /// Guest-visible section count, physical plus overcommitted.
    pub fn virt_ms_count(&self) -> u64 {
        self.phys_ms_count + self.virt_extra_ms_count
    }

    pub fn phys_bytes(&self) -> u64 {
        self.phys_ms_count * self.ms_size
    }

    pub fn virt_bytes(&self) -> u64 {
        self.virt_ms_count() * self.ms_size
    }

    /// Extra virtual capacity over physical, as a fraction.
    pub fn elasticity(&self) -> f64 {
        self.virt_extra_ms_count as f64 / self.phys_ms_count as f64
    }

    /// Default metadata reservation: 1.2% of physical capacity.
    pub fn default_mpool_reservation(&self) -> u64 {
        self.phys_bytes() * 12 / 1000
    }
}

/// Contents of one physical MP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PageContent {
    Zero,
    Data(Box<[u8]>),
}

impl PageContent {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        if bytes.iter().all(|&b| b == 0) {
            PageContent::Zero
        } else {
            PageContent::Data(bytes.into())
        }
    }

    pub fn copy_to(&self, out: &mut [u8]) {
        match self {
            PageContent::Zero => out.fill(0),
            PageContent::Data(d) => out.copy_from_slice(d),
        }
    }

    pub fn to_vec(&self, mp_size: usize) -> Vec<u8> {
        let mut v = vec![0; mp_size];
        self.copy_to(&mut v);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mapping {
    NotPresent,
    Huge(Pfn),
    /// Per-MP physical section; an MP always sits at its own offset.
    Small(Box<[Option<Pfn>]>),
}

impl Mapping {
    pub fn kind(&self) -> &'static str {
        match self {
            Mapping::NotPresent => "not-present",
            Mapping::Huge(_) => "huge",
            Mapping::Small(_) => "small",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableView {
    Ept,
    Iommu,
}

/// Physical location of one MP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhysPage {
    pub pfn: Pfn,
    pub offset: usize,
}

impl PhysPage {
    /// Flat physical page index.
    pub fn index(&self, mps_per_ms: usize) -> u64 {
        self.pfn.0 * mps_per_ms as u64 + self.offset as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translation {
    Present(PhysPage),
    NotPresent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetaTag {
    PageTables,
    SwapReqs,
    Lru,
    Scheduler,
    Dma,
    Upgrade,
    Other,
}

impl fmt::Display for MetaTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MetaTag::PageTables => "page_tables",
            MetaTag::SwapReqs => "swap_reqs",
            MetaTag::Lru => "lru",
            MetaTag::Scheduler => "scheduler",
            MetaTag::Dma => "dma",
            MetaTag::Upgrade => "upgrade",
            MetaTag::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeClass {
    B64,
    B256,
    K1,
    K4,
    FullMs,
}

impl SizeClass {
    pub const SLABS: [SizeClass; 4] = [
        SizeClass::B64,
        SizeClass::B256,
        SizeClass::K1,
        SizeClass::K4,
    ];

    pub fn bytes(&self, ms_size: u64) -> u64 {
        match self {
            SizeClass::B64 => 64,
            SizeClass::B256 => 256,
            SizeClass::K1 => KIB,
            SizeClass::K4 => 4 * KIB,
            SizeClass::FullMs => ms_size,
        }
    }

    /// Smallest class that holds `bytes`.
    pub fn fitting(bytes: u64, ms_size: u64) -> Option<SizeClass> {
        Self::SLABS
            .into_iter()
            .chain(std::iter::once(SizeClass::FullMs))
            .find(|c| c.bytes(ms_size) >= bytes && c.bytes(ms_size) <= ms_size)
    }
}

/// Pinned allocation from the metadata pool. The address is identity mapped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MpoolBlock {
    pub id: u64,
    pub class: SizeClass,
    pub bytes: u64,
    pub owner: MetaTag,
    pub gfn: Gfn,
    pub offset: u64,
    pub pinned: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MpoolReport {
    pub reservation: u64,
    pub used_bytes: u64,
    pub full_page_bytes: u64,
    pub slab_bytes: u64,
    pub by_owner: BTreeMap<MetaTag, u64>,
}

impl MpoolReport {
    pub fn full_page_fraction(&self) -> f64 {
        if self.used_bytes == 0 {
            0.0
        } else {
            self.full_page_bytes as f64 / self.used_bytes as f64
        }
    }
}

#[derive(Debug, Clone)]
enum MsUse {
    Free,
    Full,
    Slab {
        class: SizeClass,
        free: Vec<u32>,
        used: u32,
    },
}

#[derive(Debug)]
struct Mpool {
    reservation: u64,
    used: u64,
    next_id: u64,
    sections: Vec<MsUse>,
    by_owner: BTreeMap<MetaTag, u64>,
    full_bytes: u64,
    slab_bytes: u64,
}

/// Snapshot of the memory counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemCounters {
    pub free_ms: u64,
    pub resident_ms: u64,
    pub swapped_mp: u64,
    pub mpool_bytes: u64,
    pub metadata_ms: u64,
}

#[derive(Debug, Default)]
struct Counters {
    free_ms: AtomicU64,
    resident_ms: AtomicU64,
    swapped_mp: AtomicU64,
    splits: AtomicU64,
    merges: AtomicU64,
}

#[derive(Debug)]
struct Entry {
    mapping: Mapping,
    pinned: bool,
}

type Frame = Option<Box<[PageContent]>>;

#[derive(Debug)]
pub struct AddressSpace {
    geometry: Geometry,
    metadata_ms: u64,
    entries: Box<[RwLock<Entry>]>,
    frames: Box<[Mutex<Frame>]>,
    free_frames: Mutex<Vec<Pfn>>,
    counters: Counters,
    mpool: Mutex<Mpool>,
}

impl AddressSpace {
    /// Builds the space with every guest MS not present and the metadata
    /// pool carved from the low physical sections.
    pub fn new(geometry: Geometry, mpool_reservation: u64) -> Result<Self> {
        geometry.validate()?;
        if mpool_reservation >= geometry.phys_bytes() {
            return Err(MemError::ReservationTooLarge {
                reservation: mpool_reservation,
                capacity: geometry.phys_bytes(),
            });
        }
        let metadata_ms = mpool_reservation.div_ceil(geometry.ms_size);
        let entries = (0..geometry.virt_ms_count())
            .map(|g| {
                let pinned = g < metadata_ms;
                let mapping = if pinned {
                    Mapping::Huge(Pfn(g))
                } else {
                    Mapping::NotPresent
                };
                RwLock::new(Entry { mapping, pinned })
            })
            .collect();
        let frames = (0..geometry.phys_ms_count)
            .map(|_| Mutex::new(None))
            .collect();
        // Popped from the back, so the lowest frame is handed out first.
        let free: Vec<Pfn> = (metadata_ms..geometry.phys_ms_count)
            .rev()
            .map(Pfn)
            .collect();
        let counters = Counters::default();
        counters.free_ms.store(free.len() as u64, Ordering::Relaxed);
        Ok(Self {
            geometry,
            metadata_ms,
            entries,
            frames,
            free_frames: Mutex::new(free),
            counters,
            mpool: Mutex::new(Mpool {
                reservation: mpool_reservation,
                used: 0,
                next_id: 0,
                sections: vec![MsUse::Free; metadata_ms as usize],
                by_owner: BTreeMap::new(),
                full_bytes: 0,
                slab_bytes: 0,
            }),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn mps_per_ms(&self) -> usize {
        self.geometry.mps_per_ms()
    }

    pub fn mp_size(&self) -> usize {
        self.geometry.mp_size as usize
    }

    /// Number of sections taken by the metadata pool window.
    pub fn metadata_ms(&self) -> u64 {
        self.metadata_ms
    }

    /// First guest MS usable by the workload.
    pub fn first_guest_gfn(&self) -> Gfn {
        Gfn(self.metadata_ms)
    }

    pub fn is_pinned(&self, gfn: Gfn) -> bool {
        gfn.0 < self.metadata_ms
    }

    fn entry(&self, gfn: Gfn) -> Result<&RwLock<Entry>> {
        self.entries
            .get(gfn.0 as usize)
            .ok_or(MemError::AddressOutOfRange(gfn))
    }

    fn check_mp(&self, mp: usize) -> Result<()> {
        let mps = self.mps_per_ms();
        if mp >= mps {
            return Err(MemError::MpOutOfRange { mp, mps });
        }
        Ok(())
    }

    pub fn mapping(&self, gfn: Gfn) -> Result<Mapping> {
        Ok(self.entry(gfn)?.read().mapping.clone())
    }

    pub fn translate(&self, gfn: Gfn, mp: usize) -> Result<Translation> {
        self.translate_in(TableView::Ept, gfn, mp)
    }

    /// Both views share the same entries.
    pub fn translate_in(&self, _view: TableView, gfn: Gfn, mp: usize) -> Result<Translation> {
        let entry = self.entry(gfn)?;
        self.check_mp(mp)?;
        let e = entry.read();
        Ok(match &e.mapping {
            Mapping::NotPresent => Translation::NotPresent,
            Mapping::Huge(pfn) => Translation::Present(PhysPage {
                pfn: *pfn,
                offset: mp,
            }),
            Mapping::Small(mps) => match mps[mp] {
                Some(pfn) => Translation::Present(PhysPage { pfn, offset: mp }),
                None => Translation::NotPresent,
            },
        })
    }

    /// True when the MS has never been populated (or is otherwise not mapped
    /// at all, as opposed to a split table with holes).
    pub fn is_unpopulated(&self, gfn: Gfn) -> Result<bool> {
        Ok(matches!(
            self.entry(gfn)?.read().mapping,
            Mapping::NotPresent
        ))
    }

    pub fn alloc_frame(&self) -> Result<Pfn> {
        let pfn = self.free_frames.lock().pop().ok_or(MemError::OutOfMemory)?;
        self.counters.free_ms.fetch_sub(1, Ordering::AcqRel);
        self.counters.resident_ms.fetch_add(1, Ordering::AcqRel);
        *self.frames[pfn.0 as usize].lock() =
            Some(vec![PageContent::Zero; self.mps_per_ms()].into_boxed_slice());
        Ok(pfn)
    }

    pub fn release_frame(&self, pfn: Pfn) {
        assert!(pfn.0 >= self.metadata_ms, "releasing pinned frame {pfn}");
        let old = self.frames[pfn.0 as usize].lock().take();
        assert!(old.is_some(), "double release of frame {pfn}");
        self.counters.resident_ms.fetch_sub(1, Ordering::AcqRel);
        self.counters.free_ms.fetch_add(1, Ordering::AcqRel);
        self.free_frames.lock().push(pfn);
    }

    /// First-touch population: maps a fresh zeroed physical MS as a huge
    /// mapping.
    pub fn populate(&self, gfn: Gfn) -> Result<Pfn> {
        if self.is_pinned(gfn) {
            return Err(MemError::Pinned(gfn));
        }
        let mut e = self.entry(gfn)?.write();
        if !matches!(e.mapping, Mapping::NotPresent) {
            return Err(MemError::State {
                gfn,
                expected: "not-present",
                found: e.mapping.kind(),
            });
        }
        let pfn = self.alloc_frame()?;
        e.mapping = Mapping::Huge(pfn);
        Ok(pfn)
    }

    /// Huge to small. Not idempotent: splitting twice is a protocol error.
    pub fn split_mapping(&self, gfn: Gfn) -> Result<()> {
        let mut e = self.entry(gfn)?.write();
        if e.pinned {
            return Err(MemError::Pinned(gfn));
        }
        let Mapping::Huge(pfn) = e.mapping else {
            return Err(MemError::State {
                gfn,
                expected: "huge",
                found: e.mapping.kind(),
            });
        };
        e.mapping = Mapping::Small(vec![Some(pfn); self.mps_per_ms()].into_boxed_slice());
        self.counters.splits.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Small to huge once every MP sits in `new_pfn`.
    pub fn merge_mapping(&self, gfn: Gfn, new_pfn: Pfn) -> Result<()> {
        let mut e = self.entry(gfn)?.write();
        let Mapping::Small(mps) = &e.mapping else {
            return Err(MemError::State {
                gfn,
                expected: "small",
                found: e.mapping.kind(),
            });
        };
        for (mp, slot) in mps.iter().enumerate() {
            match slot {
                None => return Err(MemError::NotResident { gfn, mp }),
                Some(p) if *p != new_pfn => {
                    return Err(MemError::Scattered {
                        gfn,
                        mp,
                        expected: new_pfn,
                        found: *p,
                    })
                }
                Some(_) => {}
            }
        }
        e.mapping = Mapping::Huge(new_pfn);
        self.counters.merges.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    /// Removes one MP from a split table.
    pub fn unmap_mp(&self, gfn: Gfn, mp: usize) -> Result<Pfn> {
        self.check_mp(mp)?;
        let mut e = self.entry(gfn)?.write();
        let kind = e.mapping.kind();
        let Mapping::Small(mps) = &mut e.mapping else {
            return Err(MemError::State {
                gfn,
                expected: "small",
                found: kind,
            });
        };
        mps[mp].take().ok_or(MemError::NotResident { gfn, mp })
    }

    /// Installs one MP into a split table, converting a not-present entry
    /// into an empty split table first.
    pub fn install_mp(&self, gfn: Gfn, mp: usize, pfn: Pfn) -> Result<()> {
        self.check_mp(mp)?;
        let mps = self.mps_per_ms();
        let mut e = self.entry(gfn)?.write();
        if matches!(e.mapping, Mapping::NotPresent) {
            e.mapping = Mapping::Small(vec![None; mps].into_boxed_slice());
        }
        let kind = e.mapping.kind();
        let Mapping::Small(slots) = &mut e.mapping else {
            return Err(MemError::State {
                gfn,
                expected: "small",
                found: kind,
            });
        };
        slots[mp] = Some(pfn);
        Ok(())
    }

    fn with_frame<R>(&self, pfn: Pfn, f: impl FnOnce(&mut [PageContent]) -> R) -> R {
        let mut frame = self.frames[pfn.0 as usize].lock();
        let pages = frame
            .as_deref_mut()
            .unwrap_or_else(|| panic!("frame {pfn} is not allocated"));
        f(pages)
    }

    pub fn read_frame_mp(&self, pfn: Pfn, mp: usize, out: &mut [u8]) {
        self.with_frame(pfn, |pages| pages[mp].copy_to(out))
    }

    pub fn write_frame_mp(&self, pfn: Pfn, mp: usize, content: PageContent) {
        self.with_frame(pfn, |pages| pages[mp] = content)
    }

    pub fn take_frame_mp(&self, pfn: Pfn, mp: usize) -> PageContent {
        self.with_frame(pfn, |pages| {
            std::mem::replace(&mut pages[mp], PageContent::Zero)
        })
    }

    /// Frame backing `gfn`/`mp`, looked up under the entry lock that `f`
    /// also runs under, so the mapping cannot be torn down mid-access.
    fn with_mapped<R>(&self, gfn: Gfn, mp: usize, f: impl FnOnce(Pfn) -> R) -> Result<R> {
        let entry = self.entry(gfn)?;
        self.check_mp(mp)?;
        let e = entry.read();
        let pfn = match &e.mapping {
            Mapping::Huge(pfn) => *pfn,
            Mapping::Small(mps) => mps[mp].ok_or(MemError::NotResident { gfn, mp })?,
            Mapping::NotPresent => return Err(MemError::NotResident { gfn, mp }),
        };
        Ok(f(pfn))
    }

    /// Guest read through the mapping table.
    pub fn read_mp(&self, gfn: Gfn, mp: usize) -> Result<Vec<u8>> {
        let mut out = vec![0; self.mp_size()];
        self.with_mapped(gfn, mp, |pfn| self.read_frame_mp(pfn, mp, &mut out))?;
        Ok(out)
    }

    /// Guest write through the mapping table.
    pub fn write_mp(&self, gfn: Gfn, mp: usize, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.mp_size() {
            return Err(MemError::BadPageLength {
                len: bytes.len(),
                expected: self.mp_size(),
            });
        }
        if self.is_pinned(gfn) {
            return Err(MemError::Pinned(gfn));
        }
        self.with_mapped(gfn, mp, |pfn| {
            self.write_frame_mp(pfn, mp, PageContent::from_bytes(bytes))
        })
    }

    pub fn counters(&self) -> MemCounters {
        MemCounters {
            free_ms: self.counters.free_ms.load(Ordering::Acquire),
            resident_ms: self.counters.resident_ms.load(Ordering::Acquire),
            swapped_mp: self.counters.swapped_mp.load(Ordering::Acquire),
            mpool_bytes: self.mpool.lock().used,
            metadata_ms: self.metadata_ms,
        }
    }

    pub fn free_ms(&self) -> u64 {
        self.counters.free_ms.load(Ordering::Acquire)
    }

    pub(crate) fn add_swapped_mp(&self, delta: i64) {
        if delta >= 0 {
            self.counters
                .swapped_mp
                .fetch_add(delta as u64, Ordering::AcqRel);
        } else {
            self.counters
                .swapped_mp
                .fetch_sub((-delta) as u64, Ordering::AcqRel);
        }
    }

    /// Total splits and merges performed so far.
    pub fn split_merge_counts(&self) -> (u64, u64) {
        (
            self.counters.splits.load(Ordering::Acquire),
            self.counters.merges.load(Ordering::Acquire),
        )
    }

    /// Checks the free/resident/metadata partition of physical memory.
    pub fn check_conservation(&self) -> bool {
        let c = self.counters();
        c.free_ms + c.resident_ms + c.metadata_ms == self.geometry.phys_ms_count
            && self.free_frames.lock().len() as u64 == c.free_ms
    }

    pub fn mpool_alloc(&self, class: SizeClass, owner: MetaTag) -> Result<MpoolBlock> {
        let ms_size = self.geometry.ms_size;
        let bytes = class.bytes(ms_size);
        let mut pool = self.mpool.lock();
        let exhausted = |pool: &Mpool| MemError::MpoolExhausted {
            requested: bytes,
            used: pool.used,
            reservation: pool.reservation,
        };
        if pool.used + bytes > pool.reservation {
            return Err(exhausted(&pool));
        }
        let (idx, offset) = if class == SizeClass::FullMs {
            let idx = pool
                .sections
                .iter()
                .position(|s| matches!(s, MsUse::Free))
                .ok_or_else(|| exhausted(&pool))?;
            pool.sections[idx] = MsUse::Full;
            (idx, 0)
        } else {
            let existing = pool.sections.iter().position(
                |s| matches!(s, MsUse::Slab { class: c, free, .. } if *c == class && !free.is_empty()),
            );
            let idx = match existing {
                Some(i) => i,
                None => {
                    let i = pool
                        .sections
                        .iter()
                        .position(|s| matches!(s, MsUse::Free))
                        .ok_or_else(|| exhausted(&pool))?;
                    let slots = (ms_size / bytes) as u32;
                    pool.sections[i] = MsUse::Slab {
                        class,
                        free: (0..slots).rev().collect(),
                        used: 0,
                    };
                    i
                }
            };
            let MsUse::Slab { free, used, .. } = &mut pool.sections[idx] else {
                unreachable!()
            };
            let slot = free.pop().expect("slab with free slot");
            *used += 1;
            (idx, slot as u64 * bytes)
        };
        pool.used += bytes;
        *pool.by_owner.entry(owner).or_default() += bytes;
        if class == SizeClass::FullMs {
            pool.full_bytes += bytes;
        } else {
            pool.slab_bytes += bytes;
        }
        let id = pool.next_id;
        pool.next_id += 1;
        Ok(MpoolBlock {
            id,
            class,
            bytes,
            owner,
            gfn: Gfn(idx as u64),
            offset,
            pinned: true,
        })
    }

    pub fn mpool_free(&self, block: MpoolBlock) {
        let mut pool = self.mpool.lock();
        let idx = block.gfn.0 as usize;
        match &mut pool.sections[idx] {
            MsUse::Full => pool.sections[idx] = MsUse::Free,
            MsUse::Slab { free, used, .. } => {
                free.push((block.offset / block.bytes) as u32);
                *used -= 1;
                if *used == 0 {
                    pool.sections[idx] = MsUse::Free;
                }
            }
            MsUse::Free => panic!("mpool double free of block {}", block.id),
        }
        pool.used -= block.bytes;
        if let Some(v) = pool.by_owner.get_mut(&block.owner) {
            *v -= block.bytes;
        }
        if block.class == SizeClass::FullMs {
            pool.full_bytes -= block.bytes;
        } else {
            pool.slab_bytes -= block.bytes;
        }
    }

    pub fn mpool_report(&self) -> MpoolReport {
        let pool = self.mpool.lock();
        MpoolReport {
            reservation: pool.reservation,
            used_bytes: pool.used,
            full_page_bytes: pool.full_bytes,
            slab_bytes: pool.slab_bytes,
            by_owner: pool.by_owner.clone(),
        }
    }
}
