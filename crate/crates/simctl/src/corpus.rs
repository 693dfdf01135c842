// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Synthetic page contents with a target zero share and compressibility.
//!
//! A non-zero page is a run of 16-byte blocks, each either random or zero.
//! The random share is calibrated once against the backend compressor so
//! the mean compressed size hits the requested ratio.

use elasmem_core::backend::{Compressor, Lz4Compressor};
use elasmem_core::Gfn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::SimError;

const BLOCK: usize = 16;
const SAMPLE_PAGES: u64 = 192;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusParams {
    /// Share of MPs that are entirely zero.
    pub zero_ratio: f64,
    /// Compressed over original size for the non-zero MPs.
    pub compress_target: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            zero_ratio: 0.7679,
            compress_target: 0.4763,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.zero_ratio) {
            return Err(SimError::Config(format!(
                "corpus.zero_ratio {} outside [0, 1]",
                self.zero_ratio
            )));
        }
        if !(self.compress_target > 0.0 && self.compress_target <= 1.0) {
            return Err(SimError::Config(format!(
                "corpus.compress_target {} outside (0, 1]",
                self.compress_target
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    params: CorpusParams,
    mp_size: usize,
    seed: u64,
    /// Probability that a block is random.
    mix: f64,
}

impl Corpus {
    pub fn new(params: CorpusParams, mp_size: usize, seed: u64) -> Result<Self, SimError> {
        params.validate()?;
        if !mp_size.is_multiple_of(BLOCK) {
            return Err(SimError::Config(format!(
                "mp size {mp_size} not a multiple of {BLOCK}"
            )));
        }
        let mut c = Self {
            params,
            mp_size,
            seed,
            mix: 1.0,
        };
        c.mix = c.calibrate();
        Ok(c)
    }

    pub fn params(&self) -> CorpusParams {
        self.params
    }

    pub fn mix(&self) -> f64 {
        self.mix
    }

    /// Contents of one MP, `None` for a zero page.
    pub fn page(&self, gfn: Gfn, mp: usize) -> Option<Vec<u8>> {
        let mut rng = self.rng(gfn.0, mp as u64);
        if rng.gen_bool(self.params.zero_ratio) {
            return None;
        }
        Some(self.fill(&mut rng, self.mix))
    }

    fn rng(&self, a: u64, b: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&a.to_le_bytes());
        seed[16..24].copy_from_slice(&b.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    fn fill(&self, rng: &mut ChaCha8Rng, mix: f64) -> Vec<u8> {
        let mut page = vec![0u8; self.mp_size];
        for block in page.chunks_mut(BLOCK) {
            if rng.gen_bool(mix) {
                rng.fill(block);
            }
        }
        // Keep the page distinguishable from a zero page.
        if page.iter().all(|b| *b == 0) {
            page[0] = 1;
        }
        page
    }

    fn ratio_at(&self, mix: f64) -> f64 {
        let lz4 = Lz4Compressor;
        let mut total = 0usize;
        for i in 0..SAMPLE_PAGES {
            let mut rng = self.rng(u64::MAX, i);
            let page = self.fill(&mut rng, mix);
            total += lz4.compress(&page).len().min(self.mp_size);
        }
        total as f64 / (SAMPLE_PAGES as usize * self.mp_size) as f64
    }

    fn calibrate(&self) -> f64 {
        let target = self.params.compress_target;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..24 {
            let mid = (lo + hi) / 2.0;
            if self.ratio_at(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo + hi) / 2.0
    }

    /// Mean compressed ratio over the first `pages` non-zero pages of
    /// section `gfn` onwards.
    pub fn measured_ratio(&self, gfn: Gfn, pages: usize) -> f64 {
        let lz4 = Lz4Compressor;
        let (mut n, mut total) = (0usize, 0usize);
        let mut at = (gfn.0, 0usize);
        while n < pages {
            if let Some(p) = self.page(Gfn(at.0), at.1) {
                total += lz4.compress(&p).len().min(self.mp_size);
                n += 1;
            }
            at = if at.1 == 511 {
                (at.0 + 1, 0)
            } else {
                (at.0, at.1 + 1)
            };
        }
        total as f64 / (pages * self.mp_size) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibrated_ratio_hits_target() {
        for target in [0.3, 0.4763, 0.8] {
            let c = Corpus::new(
                CorpusParams {
                    zero_ratio: 0.5,
                    compress_target: target,
                },
                4096,
                1,
            )
            .unwrap();
            let got = c.measured_ratio(Gfn(100), 500);
            assert!((got - target).abs() < 0.01, "target {target}: {got}");
        }
    }

    #[test]
    fn pages_are_deterministic_and_zero_share_holds() {
        let c = Corpus::new(CorpusParams::default(), 4096, 9).unwrap();
        let d = Corpus::new(CorpusParams::default(), 4096, 9).unwrap();
        let mut zeros = 0;
        for g in 0..200u64 {
            for mp in 0..16 {
                let p = c.page(Gfn(g), mp);
                assert_eq!(p, d.page(Gfn(g), mp));
                zeros += p.is_none() as usize;
            }
        }
        let share = zeros as f64 / 3200.0;
        assert!((share - 0.7679).abs() < 0.03, "{share}");
        let other = Corpus::new(CorpusParams::default(), 4096, 10).unwrap();
        assert!((0..64).any(|mp| c.page(Gfn(1), mp) != other.page(Gfn(1), mp)));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(Corpus::new(
            CorpusParams {
                zero_ratio: 1.5,
                compress_target: 0.5
            },
            4096,
            0
        )
        .is_err());
        assert!(Corpus::new(
            CorpusParams {
                zero_ratio: 0.5,
                compress_target: 0.0
            },
            4096,
            0
        )
        .is_err());
    }
}
