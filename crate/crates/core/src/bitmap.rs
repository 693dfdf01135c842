// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Fixed-length atomic bitmap used for per-MP swap state.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug)]
pub struct AtomicBitmap {
    words: Box<[AtomicU64]>,
    len: usize,
}

impl AtomicBitmap {
    pub fn new(len: usize) -> Self {
        let words = (0..len.div_ceil(64)).map(|_| AtomicU64::new(0)).collect();
        Self { words, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn locate(&self, bit: usize) -> (usize, u64) {
        assert!(bit < self.len, "bit {bit} out of range {}", self.len);
        (bit / 64, 1u64 << (bit % 64))
    }

    pub fn get(&self, bit: usize) -> bool {
        let (w, mask) = self.locate(bit);
        self.words[w].load(Ordering::Acquire) & mask != 0
    }

    /// Sets `bit` and returns its previous value.
    pub fn test_and_set(&self, bit: usize) -> bool {
        let (w, mask) = self.locate(bit);
        self.words[w].fetch_or(mask, Ordering::AcqRel) & mask != 0
    }

    /// Clears `bit` and returns its previous value.
    pub fn test_and_clear(&self, bit: usize) -> bool {
        let (w, mask) = self.locate(bit);
        self.words[w].fetch_and(!mask, Ordering::AcqRel) & mask != 0
    }

    pub fn count_ones(&self) -> usize {
        self.words
            .iter()
            .map(|w| w.load(Ordering::Acquire).count_ones() as usize)
            .sum()
    }

    pub fn is_full(&self) -> bool {
        self.count_ones() == self.len
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&b| self.get(b))
    }

    /// Word-wise snapshot, unused high bits are zero.
    pub fn snapshot(&self) -> Vec<u64> {
        self.words
            .iter()
            .map(|w| w.load(Ordering::Acquire))
            .collect()
    }

    /// Storage footprint in bytes at one bit per entry.
    pub fn byte_len(&self) -> usize {
        self.len.div_ceil(8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_clear_and_count() {
        let bm = AtomicBitmap::new(70);
        assert!(!bm.test_and_set(3));
        assert!(bm.test_and_set(3));
        assert!(!bm.test_and_set(69));
        assert_eq!(bm.count_ones(), 2);
        assert_eq!(bm.iter_ones().collect::<Vec<_>>(), vec![3, 69]);
        assert!(bm.test_and_clear(3));
        assert!(!bm.test_and_clear(3));
        assert_eq!(bm.count_ones(), 1);
        assert_eq!(bm.byte_len(), 9);
    }

    #[test]
    fn full_detection() {
        let bm = AtomicBitmap::new(16);
        for b in 0..16 {
            bm.test_and_set(b);
        }
        assert!(bm.is_full());
        bm.test_and_clear(7);
        assert!(!bm.is_full());
    }

    #[test]
    #[should_panic]
    fn out_of_range_panics() {
        AtomicBitmap::new(8).get(8);
    }
}
