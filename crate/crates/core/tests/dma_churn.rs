// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

mod common;

use elasmem_core::dma_guard::{DmaAccess, DmaError};
use elasmem_core::events::EventKind;
use elasmem_core::mem_model::{Geometry, Gfn};
use elasmem_core::swap::Watermarks;
use elasmem_core::{Engine, EngineConfig, EngineError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn engine() -> Engine {
    let mut cfg = EngineConfig::new(Geometry::scaled(64, 64));
    cfg.mpool_reservation = Some(64 * 1024);
    cfg.watermarks = Some(Watermarks {
        min: 2,
        low: 4,
        high: 8,
    });
    Engine::new(cfg).unwrap()
}

#[test]
fn churn_under_reclaim_never_swaps_active_ranges() {
    let e = engine();
    for g in 1..56 {
        e.write(Gfn(g), (g % 16) as usize, &vec![g as u8; 4096])
            .unwrap();
    }
    std::thread::scope(|s| {
        let e = &e;
        s.spawn(move || {
            for _ in 0..20_000 {
                e.scan_tick(0);
                e.swap().reclaim(2);
                std::thread::yield_now();
            }
        });
        for dev in 0..2u64 {
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(dev);
                let owner = format!("dev{dev}");
                for _ in 0..2_000 {
                    let start = rng.gen_range(1..50);
                    let count = rng.gen_range(1..6);
                    match e.register_dma(Gfn(start), count, &owner) {
                        Ok(()) => {
                            for _ in 0..8 {
                                let g = Gfn(start + rng.gen_range(0..count));
                                let a = e.dma_access(g, rng.gen_range(0..16)).unwrap();
                                assert_eq!(a, DmaAccess::Ok, "in-range access to {g}");
                            }
                            assert!(e.unregister_dma(Gfn(start), count, &owner));
                        }
                        Err(EngineError::Dma(DmaError::Overlap { .. })) => {}
                        Err(other) => panic!("{other}"),
                    }
                }
            });
        }
        s.spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            for _ in 0..50_000 {
                let g = Gfn(rng.gen_range(1..56));
                let mp = rng.gen_range(0..16);
                if rng.gen_bool(0.5) {
                    e.access(g, mp).unwrap();
                } else {
                    e.dma_access(g, mp).unwrap();
                }
            }
        });
    });
    let events = e.events().snapshot();
    assert_eq!(common::dma_pin_violations(&events), vec![]);
    common::check_swap_log(&events, 16).unwrap();
    let stats = e.dma_stats();
    assert_eq!(stats.violations, 0);
    assert_eq!(stats.dmar_events, stats.recovered);
    for ev in &events {
        if let EventKind::Dmar {
            recovered, crc_ok, ..
        } = ev.kind
        {
            assert!(recovered && crc_ok);
        }
    }
    assert!(e.swap_stats().mp_out > 0);
    assert!(stats.registrations > 100);
    e.check_invariants().unwrap();
    for g in 1..56 {
        assert_eq!(
            e.read(Gfn(g), (g % 16) as usize).unwrap(),
            vec![g as u8; 4096]
        );
    }
}
