// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use elasmem_core::dma_guard::DmaRanges;
use elasmem_core::lru::{Lru, LruConfig};
use elasmem_core::mem_model::Gfn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: u64 = 256;

/// Drives `scans` scan periods with `accesses` spread over them and checks
/// the cold-half bound and the one-level step after every scan.
fn run(
    cfg: LruConfig,
    seed: u64,
    accesses: usize,
    scans: usize,
    hot_fraction: f64,
) -> Result<(), String> {
    let lru = Lru::new(cfg, N, 0, Arc::new(DmaRanges::default())).map_err(|e| e.to_string())?;
    for g in 0..N {
        lru.track(Gfn(g)).map_err(|e| e.to_string())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hot = ((N as f64) * hot_fraction).max(1.0) as u64;
    let bound = (cfg.levels / 2) as u64 + cfg.stabilize_scans as u64;
    let mut idle = vec![0u64; N as usize];
    let per_scan = accesses / scans;
    for scan in 0..scans {
        let mut touched = vec![false; N as usize];
        for _ in 0..per_scan {
            let g = if rng.gen_bool(0.9) {
                rng.gen_range(0..hot)
            } else {
                rng.gen_range(0..N)
            };
            lru.harvest_access(Gfn(g));
            touched[g as usize] = true;
        }
        let before: Vec<usize> = (0..N).map(|g| lru.level_of(Gfn(g)).unwrap()).collect();
        for w in 0..cfg.workers {
            lru.scan_tick(w);
        }
        for g in 0..N as usize {
            idle[g] = if touched[g] { 0 } else { idle[g] + 1 };
            let level = lru.level_of(Gfn(g as u64)).unwrap();
            if level.abs_diff(before[g]) > 1 {
                return Err(format!(
                    "scan {scan}: gfn {g} moved {} -> {level}",
                    before[g]
                ));
            }
            if touched[g] && level > before[g] {
                return Err(format!("scan {scan}: accessed gfn {g} demoted"));
            }
            if idle[g] >= bound && !cfg.is_cold_half(level) {
                return Err(format!(
                    "scan {scan}: gfn {g} idle {} scans but at level {level}",
                    idle[g]
                ));
            }
        }
        if !lru.check_partition() {
            return Err(format!("scan {scan}: partition broken"));
        }
    }
    Ok(())
}

#[test]
fn default_config_on_long_trace() {
    run(LruConfig::default(), 42, 100_000, 400, 0.3).unwrap();
}

#[test]
fn sharded_workers_keep_the_bound() {
    let cfg = LruConfig {
        workers: 4,
        batch: 8,
        ..LruConfig::default()
    };
    run(cfg, 5, 100_000, 400, 0.2).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cold_half_bound_holds(
        seed in any::<u64>(),
        half in 2usize..5,
        stab in 1u32..4,
        workers in 1usize..4,
        hot in 0.05f64..0.9,
    ) {
        let cfg = LruConfig { levels: half * 2, stabilize_scans: stab, workers, batch: 16 };
        run(cfg, seed, 20_000, 100, hot).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn coldest_hands_out_head_first() {
    let lru = Lru::new(LruConfig::default(), 16, 2, Arc::new(DmaRanges::default())).unwrap();
    for g in [5, 3, 9, 7] {
        lru.track(Gfn(g)).unwrap();
    }
    for _ in 0..5 {
        lru.scan_tick(0);
    }
    assert_eq!(
        lru.members(LruConfig::default().cold()),
        vec![Gfn(5), Gfn(3), Gfn(9), Gfn(7)]
    );
    assert_eq!(lru.coldest(2), vec![Gfn(5), Gfn(3)]);
    assert!(!lru.is_tracked(Gfn(5)));
    assert_eq!(lru.cold_supply(), 2);
    assert!(lru.track(Gfn(1)).is_err());
}
