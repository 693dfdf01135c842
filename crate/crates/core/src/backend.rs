// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! In-memory swap destination.
//!
//! Every swapped MP becomes a [`BackendSlot`]: all-zero pages are kept as a
//! bare marker, anything else goes through the block compressor. Pages that
//! do not shrink are kept raw inside a compressed slot so a slot never grows
//! past one MP. Each slot carries a CRC-32 of the original bytes which is
//! re-checked on load.

use std::fmt;

use parking_lot::Mutex;
use thiserror::Error;

use crate::mem_model::PageContent;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("page of {len} bytes, backend stores {expected}-byte pages")]
    BadLength { len: usize, expected: usize },
    #[error("backend full: {needed} payload bytes requested, {used} of {capacity} used")]
    Full {
        needed: u64,
        used: u64,
        capacity: u64,
    },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("decompression failed: {0}")]
    Decompress(String),
}

impl BackendError {
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            BackendError::CrcMismatch { .. } | BackendError::Decompress(_)
        )
    }
}

/// Two-function compressor contract.
pub trait Compressor: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn compress(&self, input: &[u8]) -> Vec<u8>;
    fn decompress(&self, input: &[u8], original_len: usize) -> Result<Vec<u8>, String>;
}

/// LZ4 block format, picked for decode speed on the fault path.
#[derive(Debug, Default, Clone, Copy)]
pub struct Lz4Compressor;

impl Compressor for Lz4Compressor {
    fn name(&self) -> &'static str {
        "lz4"
    }

    fn compress(&self, input: &[u8]) -> Vec<u8> {
        lz4_flex::block::compress(input)
    }

    fn decompress(&self, input: &[u8], original_len: usize) -> Result<Vec<u8>, String> {
        let out = lz4_flex::block::decompress(input, original_len).map_err(|e| e.to_string())?;
        if out.len() != original_len {
            return Err(format!(
                "decoded {} bytes, expected {original_len}",
                out.len()
            ));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PageSource {
    Zero,
    Compressed,
}

impl fmt::Display for PageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PageSource::Zero => f.write_str("zero"),
            PageSource::Compressed => f.write_str("compressed"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Zero,
    /// `raw` marks incompressible payloads stored verbatim.
    Compressed {
        raw: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSlot {
    kind: SlotKind,
    payload: Box<[u8]>,
    original_size: u32,
    crc: u32,
}

impl BackendSlot {
    pub fn kind(&self) -> SlotKind {
        self.kind
    }

    pub fn source(&self) -> PageSource {
        match self.kind {
            SlotKind::Zero => PageSource::Zero,
            SlotKind::Compressed { .. } => PageSource::Compressed,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn original_size(&self) -> usize {
        self.original_size as usize
    }

    pub fn crc(&self) -> u32 {
        self.crc
    }

    /// Fault injection: flips one payload bit, or the CRC when the payload
    /// is empty.
    pub fn flip_bit(&mut self, bit: usize) {
        if self.payload.is_empty() {
            self.crc ^= 1 << (bit % 32);
        } else {
            let byte = (bit / 8) % self.payload.len();
            self.payload[byte] ^= 1 << (bit % 8);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BackendStats {
    pub stored_mp: u64,
    pub zero_mp: u64,
    pub compressed_mp: u64,
    /// Subset of `compressed_mp` held verbatim.
    pub raw_mp: u64,
    pub payload_bytes: u64,
    pub crc_bytes: u64,
}

impl BackendStats {
    pub fn zero_ratio(&self) -> f64 {
        if self.stored_mp == 0 {
            0.0
        } else {
            self.zero_mp as f64 / self.stored_mp as f64
        }
    }

    /// Payload over original size of the non-zero pages.
    pub fn compression_ratio(&self, mp_size: u64) -> f64 {
        if self.compressed_mp == 0 {
            0.0
        } else {
            self.payload_bytes as f64 / (self.compressed_mp * mp_size) as f64
        }
    }

    pub fn footprint_bytes(&self) -> u64 {
        self.payload_bytes + self.crc_bytes
    }
}

pub const CRC_BYTES: u64 = 4;

#[derive(Debug)]
pub struct Backend {
    mp_size: usize,
    compressor: Box<dyn Compressor>,
    capacity: Option<u64>,
    zero_crc: u32,
    stats: Mutex<BackendStats>,
}

impl Backend {
    pub fn new(mp_size: usize) -> Self {
        Self::with_compressor(mp_size, Box::new(Lz4Compressor))
    }

    pub fn with_compressor(mp_size: usize, compressor: Box<dyn Compressor>) -> Self {
        Self {
            mp_size,
            compressor,
            capacity: None,
            zero_crc: crc32fast::hash(&vec![0; mp_size]),
            stats: Mutex::new(BackendStats::default()),
        }
    }

    /// Caps the total payload bytes held.
    pub fn with_capacity(mut self, payload_capacity: u64) -> Self {
        self.capacity = Some(payload_capacity);
        self
    }

    pub fn mp_size(&self) -> usize {
        self.mp_size
    }

    pub fn compressor_name(&self) -> &'static str {
        self.compressor.name()
    }

    pub fn store(&self, bytes: &[u8]) -> Result<BackendSlot, BackendError> {
        if bytes.len() != self.mp_size {
            return Err(BackendError::BadLength {
                len: bytes.len(),
                expected: self.mp_size,
            });
        }
        let slot = if bytes.iter().all(|&b| b == 0) {
            BackendSlot {
                kind: SlotKind::Zero,
                payload: Box::default(),
                original_size: self.mp_size as u32,
                crc: self.zero_crc,
            }
        } else {
            let crc = crc32fast::hash(bytes);
            let packed = self.compressor.compress(bytes);
            let (raw, payload) = if packed.len() >= self.mp_size {
                (true, Box::<[u8]>::from(bytes))
            } else {
                (false, packed.into_boxed_slice())
            };
            BackendSlot {
                kind: SlotKind::Compressed { raw },
                payload,
                original_size: self.mp_size as u32,
                crc,
            }
        };
        self.account_store(&slot)?;
        Ok(slot)
    }

    /// Stores a page already held as [`PageContent`], skipping the zero scan
    /// for known-zero pages.
    pub fn store_content(&self, content: &PageContent) -> Result<BackendSlot, BackendError> {
        match content {
            PageContent::Zero => {
                let slot = BackendSlot {
                    kind: SlotKind::Zero,
                    payload: Box::default(),
                    original_size: self.mp_size as u32,
                    crc: self.zero_crc,
                };
                self.account_store(&slot)?;
                Ok(slot)
            }
            PageContent::Data(d) => self.store(d),
        }
    }

    fn account_store(&self, slot: &BackendSlot) -> Result<(), BackendError> {
        let mut s = self.stats.lock();
        let needed = slot.payload.len() as u64;
        if let Some(capacity) = self.capacity {
            if s.payload_bytes + needed > capacity {
                return Err(BackendError::Full {
                    needed,
                    used: s.payload_bytes,
                    capacity,
                });
            }
        }
        s.stored_mp += 1;
        s.crc_bytes += CRC_BYTES;
        s.payload_bytes += needed;
        match slot.kind {
            SlotKind::Zero => s.zero_mp += 1,
            SlotKind::Compressed { raw } => {
                s.compressed_mp += 1;
                s.raw_mp += raw as u64;
            }
        }
        Ok(())
    }

    pub fn load(&self, slot: &BackendSlot) -> Result<Vec<u8>, BackendError> {
        Ok(self.load_content(slot)?.to_vec(self.mp_size))
    }

    /// Restores the page, verifying the CRC.
    pub fn load_content(&self, slot: &BackendSlot) -> Result<PageContent, BackendError> {
        match slot.kind {
            SlotKind::Zero => {
                if slot.crc != self.zero_crc {
                    return Err(BackendError::CrcMismatch {
                        stored: slot.crc,
                        computed: self.zero_crc,
                    });
                }
                Ok(PageContent::Zero)
            }
            SlotKind::Compressed { raw } => {
                let bytes = if raw {
                    slot.payload.to_vec()
                } else {
                    self.compressor
                        .decompress(&slot.payload, slot.original_size())
                        .map_err(BackendError::Decompress)?
                };
                if bytes.len() != self.mp_size {
                    return Err(BackendError::Decompress(format!(
                        "restored {} bytes, expected {}",
                        bytes.len(),
                        self.mp_size
                    )));
                }
                let computed = crc32fast::hash(&bytes);
                if computed != slot.crc {
                    return Err(BackendError::CrcMismatch {
                        stored: slot.crc,
                        computed,
                    });
                }
                Ok(PageContent::Data(bytes.into_boxed_slice()))
            }
        }
    }

    /// Drops a slot whose page has been restored.
    pub fn release(&self, slot: BackendSlot) {
        let mut s = self.stats.lock();
        s.stored_mp -= 1;
        s.crc_bytes -= CRC_BYTES;
        s.payload_bytes -= slot.payload.len() as u64;
        match slot.kind {
            SlotKind::Zero => s.zero_mp -= 1,
            SlotKind::Compressed { raw } => {
                s.compressed_mp -= 1;
                s.raw_mp -= raw as u64;
            }
        }
    }

    pub fn stats(&self) -> BackendStats {
        *self.stats.lock()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MP: usize = 4096;

    #[test]
    fn zero_page_is_a_marker() {
        let b = Backend::new(MP);
        let slot = b.store(&[0; MP]).unwrap();
        assert_eq!(slot.kind(), SlotKind::Zero);
        assert!(slot.payload().is_empty());
        assert_eq!(slot.crc(), crc32fast::hash(&[0; MP]));
        assert_eq!(b.load(&slot).unwrap(), vec![0; MP]);
    }

    #[test]
    fn random_page_falls_back_to_raw() {
        let b = Backend::new(MP);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut page = vec![0u8; MP];
        rng.fill_bytes(&mut page);
        let slot = b.store(&page).unwrap();
        assert_eq!(slot.kind(), SlotKind::Compressed { raw: true });
        assert_eq!(slot.payload().len(), MP);
        assert_eq!(b.load(&slot).unwrap(), page);
        assert_eq!(b.stats().raw_mp, 1);
    }

    #[test]
    fn compressible_page_shrinks() {
        let b = Backend::new(MP);
        let page: Vec<u8> = (0..MP).map(|i| (i / 64) as u8).collect();
        let slot = b.store(&page).unwrap();
        assert_eq!(slot.kind(), SlotKind::Compressed { raw: false });
        assert!(!slot.payload().is_empty() && slot.payload().len() < MP);
        assert_eq!(b.load(&slot).unwrap(), page);
    }

    #[test]
    fn bit_flip_is_detected() {
        let b = Backend::new(MP);
        let mut page = vec![0u8; MP];
        page[100] = 9;
        page[3000] = 200;
        let mut slot = b.store(&page).unwrap();
        slot.flip_bit(13);
        let err = b.load(&slot).unwrap_err();
        assert!(err.is_corruption(), "{err:?}");

        let mut zero = b.store(&[0; MP]).unwrap();
        zero.flip_bit(3);
        assert!(matches!(
            b.load(&zero),
            Err(BackendError::CrcMismatch { .. })
        ));
    }

    #[test]
    fn wrong_length_is_rejected() {
        let b = Backend::new(MP);
        assert!(matches!(
            b.store(&[1; 10]),
            Err(BackendError::BadLength { .. })
        ));
    }

    #[test]
    fn capacity_limit() {
        let b = Backend::new(MP).with_capacity(MP as u64);
        let page = vec![0xAB; MP];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noise = vec![0u8; MP];
        rng.fill_bytes(&mut noise);
        b.store(&noise).unwrap();
        assert!(matches!(b.store(&page), Err(BackendError::Full { .. })));
        // Zero pages need no payload and still fit.
        b.store(&[0; MP]).unwrap();
    }

    #[test]
    fn stats_accounting() {
        let b = Backend::new(MP);
        assert_eq!(b.stats(), BackendStats::default());
        let z = b.store(&[0; MP]).unwrap();
        let c = b.store(&vec![5u8; MP]).unwrap();
        let s = b.stats();
        assert_eq!(s.stored_mp, 2);
        assert_eq!(s.zero_mp + s.compressed_mp, s.stored_mp);
        assert_eq!(s.crc_bytes, 4 * s.stored_mp);
        assert_eq!(s.payload_bytes, c.payload().len() as u64);
        b.release(z);
        b.release(c);
        assert_eq!(b.stats(), BackendStats::default());
    }

    #[test]
    fn random_roundtrip_ten_thousand_pages() {
        let b = Backend::new(MP);
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
        let mut page = vec![0u8; MP];
        for _ in 0..10_000 {
            page.fill(0);
            match rng.gen_range(0..4) {
                0 => {}
                1 => rng.fill_bytes(&mut page),
                _ => {
                    let n = rng.gen_range(1..MP);
                    rng.fill_bytes(&mut page[..n]);
                }
            }
            let slot = b.store(&page).unwrap();
            assert_eq!(slot.kind() == SlotKind::Zero, page.iter().all(|&x| x == 0));
            assert!(slot.payload().len() <= MP);
            assert_eq!(b.load(&slot).unwrap(), page);
        }
        let s = b.stats();
        assert!(s.payload_bytes <= s.stored_mp * MP as u64);
    }
}
