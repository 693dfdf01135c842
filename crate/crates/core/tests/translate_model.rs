// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! The mapping table against a flat per-MP reference array.

use elasmem_core::mem_model::{Geometry, Gfn, Translation};
use elasmem_core::swap::Watermarks;
use elasmem_core::{Engine, EngineConfig};
use proptest::prelude::*;

const MPS: usize = 16;
const FIRST: u64 = 1;
const LAST: u64 = 40;

#[derive(Debug, Clone)]
enum Op {
    Touch(u64, usize),
    Write(u64, usize, u8),
    SwapOut(u64),
    Fault(u64, usize),
    Prefetch(u64),
    Check(u64, usize),
}

fn op() -> impl Strategy<Value = Op> {
    let g = FIRST..LAST;
    let mp = 0..MPS;
    prop_oneof![
        3 => (g.clone(), mp.clone()).prop_map(|(g, m)| Op::Touch(g, m)),
        2 => (g.clone(), mp.clone(), any::<u8>()).prop_map(|(g, m, t)| Op::Write(g, m, t)),
        2 => g.clone().prop_map(Op::SwapOut),
        2 => (g.clone(), mp.clone()).prop_map(|(g, m)| Op::Fault(g, m)),
        1 => g.clone().prop_map(Op::Prefetch),
        3 => (g, mp).prop_map(|(g, m)| Op::Check(g, m)),
    ]
}

/// Flat model: populated flag, residency and a content tag per MP.
struct Model {
    populated: Vec<bool>,
    resident: Vec<bool>,
    tag: Vec<u8>,
}

impl Model {
    fn i(g: u64, mp: usize) -> usize {
        g as usize * MPS + mp
    }
}

fn page(tag: u8) -> Vec<u8> {
    vec![tag; 4096]
}

fn run(ops: &[Op]) -> Result<(), TestCaseError> {
    let mut cfg = EngineConfig::new(Geometry::scaled(64, 16));
    cfg.mpool_reservation = Some(64 * 1024);
    cfg.watermarks = Some(Watermarks {
        min: 1,
        low: 2,
        high: 3,
    });
    cfg.record_events = false;
    let e = Engine::new(cfg).unwrap();
    let n = 80 * MPS;
    let mut m = Model {
        populated: vec![false; 80],
        resident: vec![false; n],
        tag: vec![0; n],
    };
    for op in ops {
        match *op {
            Op::Touch(g, mp) => {
                e.access(Gfn(g), mp).unwrap();
                if !m.populated[g as usize] {
                    m.populated[g as usize] = true;
                    for k in 0..MPS {
                        m.resident[Model::i(g, k)] = true;
                    }
                }
                m.resident[Model::i(g, mp)] = true;
            }
            Op::Write(g, mp, t) => {
                e.write(Gfn(g), mp, &page(t)).unwrap();
                if !m.populated[g as usize] {
                    m.populated[g as usize] = true;
                    for k in 0..MPS {
                        m.resident[Model::i(g, k)] = true;
                    }
                }
                m.resident[Model::i(g, mp)] = true;
                m.tag[Model::i(g, mp)] = t;
            }
            Op::SwapOut(g) => {
                if m.populated[g as usize] {
                    e.lru().untrack(Gfn(g));
                    e.swap().swap_out_ms(Gfn(g)).unwrap();
                    for k in 0..MPS {
                        m.resident[Model::i(g, k)] = false;
                    }
                }
            }
            Op::Fault(g, mp) => {
                let r = e.swap().fault_in(Gfn(g), mp);
                let i = Model::i(g, mp);
                if m.populated[g as usize] && !m.resident[i] {
                    prop_assert!(r.is_ok(), "{r:?}");
                    m.resident[i] = true;
                } else {
                    prop_assert!(r.is_err());
                }
            }
            Op::Prefetch(g) => {
                e.swap().prefetch_in(Gfn(g)).unwrap();
                if m.populated[g as usize] {
                    for k in 0..MPS {
                        m.resident[Model::i(g, k)] = true;
                    }
                }
            }
            Op::Check(g, mp) => {
                let i = Model::i(g, mp);
                let t = e.space().translate(Gfn(g), mp).unwrap();
                prop_assert_eq!(
                    matches!(t, Translation::Present(_)),
                    m.resident[i],
                    "gfn {} mp {}",
                    g,
                    mp
                );
                if m.resident[i] {
                    prop_assert_eq!(e.space().read_mp(Gfn(g), mp).unwrap(), page(m.tag[i]));
                }
            }
        }
    }
    for g in FIRST..LAST {
        for mp in 0..MPS {
            let t = e.space().translate(Gfn(g), mp).unwrap();
            prop_assert_eq!(
                matches!(t, Translation::Present(_)),
                m.resident[Model::i(g, mp)]
            );
        }
    }
    e.check_invariants().map_err(TestCaseError::fail)?;
    prop_assert_eq!(e.swap_stats().emergency_runs, 0);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 3, max_shrink_iters: 64, ..ProptestConfig::default() })]

    #[test]
    fn translate_matches_flat_model(ops in proptest::collection::vec(op(), 100_000)) {
        run(&ops)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn translate_matches_flat_model_short(ops in proptest::collection::vec(op(), 1..400)) {
        run(&ops)?;
    }
}
