// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

use elasmem_core::events::{EventKind, ReclaimState};
use elasmem_core::mem_model::{Geometry, Gfn, MemCounters};
use elasmem_core::swap::{WatermarkPolicy, Watermarks};
use elasmem_core::{Engine, EngineConfig};
use proptest::prelude::*;

/// Hand-written reference: reclaim starts strictly below low, stops at or
/// above high, and pauses between low and high when nothing is cold.
fn reference(wm: Watermarks, inputs: &[(u64, usize)]) -> Vec<(bool, u64)> {
    let mut reclaiming = false;
    let mut out = Vec::new();
    for &(free, cold) in inputs {
        if !reclaiming && free < wm.low {
            reclaiming = true;
        } else if reclaiming && free >= wm.high {
            reclaiming = false;
        }
        let target = if !reclaiming || (cold == 0 && free >= wm.low) {
            0
        } else {
            wm.high.saturating_sub(free)
        };
        out.push((reclaiming, target));
    }
    out
}

fn policy_run(wm: Watermarks, inputs: &[(u64, usize)]) -> Vec<(bool, u64)> {
    let mut p = WatermarkPolicy::new(wm);
    inputs
        .iter()
        .map(|&(free, cold)| {
            let d = p.tick(
                &MemCounters {
                    free_ms: free,
                    ..Default::default()
                },
                cold,
            );
            (d.state == ReclaimState::Reclaiming, d.target_ms)
        })
        .collect()
}

fn sawtooth(top: u64, periods: usize) -> Vec<u64> {
    let mut v = Vec::new();
    for _ in 0..periods {
        v.extend((0..=top).rev());
        v.extend(1..top);
    }
    v
}

#[test]
fn sawtooth_matches_reference() {
    let wm = Watermarks {
        min: 2,
        low: 6,
        high: 12,
    };
    let inputs: Vec<(u64, usize)> = sawtooth(20, 5).into_iter().map(|f| (f, 4)).collect();
    assert_eq!(policy_run(wm, &inputs), reference(wm, &inputs));
    let states: Vec<bool> = policy_run(wm, &inputs)
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    // Reclaiming flips only on crossings of low (down) and high (up).
    for (i, w) in states.windows(2).enumerate() {
        if w[0] != w[1] {
            let free = inputs[i + 1].0;
            if w[1] {
                assert!(free < wm.low);
            } else {
                assert!(free >= wm.high);
            }
        }
    }
}

#[test]
fn spike_with_and_without_cold_supply() {
    let wm = Watermarks {
        min: 2,
        low: 6,
        high: 12,
    };
    let mut inputs = Vec::new();
    for (free, cold) in [
        (20, 5),
        (4, 5),
        (8, 0),
        (9, 0),
        (5, 0),
        (11, 3),
        (12, 3),
        (7, 3),
        (5, 1),
        (13, 1),
    ] {
        inputs.push((free, cold));
    }
    assert_eq!(policy_run(wm, &inputs), reference(wm, &inputs));
}

proptest! {
    #[test]
    fn random_free_series_matches_reference(
        series in proptest::collection::vec((0u64..40, 0usize..3), 1..300),
        min in 0u64..4, dlow in 1u64..6, dhigh in 1u64..10,
    ) {
        let wm = Watermarks { min, low: min + dlow, high: min + dlow + dhigh };
        prop_assert_eq!(policy_run(wm, &series), reference(wm, &series));
    }
}

/// Engine under a spike of first touches with a reclaim slice after every
/// few accesses: state transitions follow the reference fed with the same
/// observations and free memory stays at or above min.
#[test]
fn engine_spike_stays_above_min() {
    let mut cfg = EngineConfig::new(Geometry::scaled(100, 50));
    cfg.mpool_reservation = Some(64 * 1024);
    let wm = Watermarks {
        min: 2,
        low: 6,
        high: 12,
    };
    cfg.watermarks = Some(wm);
    let e = Engine::new(cfg).unwrap();
    let mut inputs = Vec::new();
    let mut decisions = Vec::new();
    let mut tick = |e: &Engine| {
        let free = e.space().free_ms();
        let cold = e.lru().cold_supply();
        let (d, _) = e.reclaim_step(usize::MAX);
        inputs.push((free, cold));
        decisions.push((d.state == ReclaimState::Reclaiming, d.target_ms));
    };
    // Steady phase: a small hot set.
    for round in 0..30 {
        for g in 1..20 {
            e.access(Gfn(g), round % 16).unwrap();
        }
        e.scan_tick(0);
        tick(&e);
    }
    // Spike: walk a large region once, as a bulk transfer would.
    for g in 20..140 {
        e.access(Gfn(g), 0).unwrap();
        assert!(
            e.space().free_ms() >= wm.min,
            "gfn {g}: free {}",
            e.space().free_ms()
        );
        if g % 4 == 0 {
            e.scan_tick(0);
            tick(&e);
        }
    }
    for _ in 0..20 {
        e.scan_tick(0);
        tick(&e);
    }
    assert_eq!(decisions, reference(wm, &inputs));
    let transitions: Vec<(ReclaimState, ReclaimState)> = e
        .events()
        .snapshot()
        .iter()
        .filter_map(|ev| match ev.kind {
            EventKind::Watermark { from, to, .. } => Some((from, to)),
            _ => None,
        })
        .collect();
    let ref_flips =
        decisions.windows(2).filter(|w| w[0].0 != w[1].0).count() + decisions[0].0 as usize;
    assert_eq!(transitions.len(), ref_flips);
    assert!(transitions.iter().any(|t| t.1 == ReclaimState::Reclaiming));
    assert_eq!(e.swap_stats().ooms, 0);
    e.check_invariants().unwrap();
}
