// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use elasmem_core::events::{Event, EventKind};
use elasmem_core::mem_model::Gfn;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub splits: u64,
    pub merges: u64,
    pub reclaims: u64,
    pub allocs: u64,
    pub mp_out: u64,
    pub mp_in: u64,
}

#[derive(Debug, Clone)]
struct MsTrack {
    huge: bool,
    frame: bool,
    out: Vec<bool>,
}

/// Replays swap events and checks every boundary fires exactly once at the
/// state where it is legal. Sections start populated and huge.
pub fn check_swap_log(events: &[Event], mps: usize) -> Result<Counts, String> {
    let mut ms: BTreeMap<Gfn, MsTrack> = BTreeMap::new();
    let mut c = Counts::default();
    let fresh = || MsTrack {
        huge: true,
        frame: true,
        out: vec![false; mps],
    };
    for ev in events {
        let seq = ev.seq;
        match &ev.kind {
            EventKind::Populate { gfn, .. } => {
                if ms.insert(*gfn, fresh()).is_some() {
                    return Err(format!("#{seq}: gfn {gfn} populated twice"));
                }
            }
            EventKind::Split { gfn } => {
                let m = ms.entry(*gfn).or_insert_with(fresh);
                if !m.huge || !m.frame || m.out.iter().any(|o| *o) {
                    return Err(format!(
                        "#{seq}: split of gfn {gfn} outside a full huge mapping"
                    ));
                }
                m.huge = false;
                c.splits += 1;
            }
            EventKind::MpOut { gfn, mp } => {
                let m = ms
                    .get_mut(gfn)
                    .ok_or(format!("#{seq}: mp-out on unknown gfn {gfn}"))?;
                if m.huge {
                    return Err(format!("#{seq}: gfn {gfn} mp {mp} out without split"));
                }
                if m.out[*mp] {
                    return Err(format!("#{seq}: gfn {gfn} mp {mp} swapped out twice"));
                }
                m.out[*mp] = true;
                c.mp_out += 1;
            }
            EventKind::Reclaim { gfn, .. } => {
                let m = ms
                    .get_mut(gfn)
                    .ok_or(format!("#{seq}: reclaim of unknown gfn {gfn}"))?;
                if !m.frame || m.out.iter().any(|o| !o) {
                    return Err(format!("#{seq}: reclaim of gfn {gfn} with resident pages"));
                }
                m.frame = false;
                c.reclaims += 1;
            }
            EventKind::AllocMs { gfn, .. } => {
                let m = ms
                    .get_mut(gfn)
                    .ok_or(format!("#{seq}: alloc for unknown gfn {gfn}"))?;
                if m.frame {
                    return Err(format!("#{seq}: second frame allocated for gfn {gfn}"));
                }
                m.frame = true;
                c.allocs += 1;
            }
            EventKind::MpIn { gfn, mp, .. } => {
                let m = ms
                    .get_mut(gfn)
                    .ok_or(format!("#{seq}: mp-in on unknown gfn {gfn}"))?;
                if !m.frame {
                    return Err(format!(
                        "#{seq}: gfn {gfn} mp {mp} restored without a frame"
                    ));
                }
                if !m.out[*mp] {
                    return Err(format!("#{seq}: gfn {gfn} mp {mp} restored twice"));
                }
                m.out[*mp] = false;
                c.mp_in += 1;
            }
            EventKind::Merge { gfn, .. } => {
                let m = ms
                    .get_mut(gfn)
                    .ok_or(format!("#{seq}: merge of unknown gfn {gfn}"))?;
                if m.huge || !m.frame || m.out.iter().any(|o| *o) {
                    return Err(format!("#{seq}: merge of gfn {gfn} before full residency"));
                }
                m.huge = true;
                c.merges += 1;
            }
            _ => {}
        }
    }
    Ok(c)
}

/// Replays DMA activation events against swap-outs. Returns the number of
/// swap-outs that hit an active range.
pub fn dma_pin_violations(events: &[Event]) -> Vec<(u64, Gfn)> {
    let mut active: BTreeSet<u64> = BTreeSet::new();
    let mut bad = Vec::new();
    for ev in events {
        match &ev.kind {
            EventKind::DmaActivate { start, count, .. } => active.extend(start.0..start.0 + count),
            EventKind::DmaDeactivate { start, count } => {
                for g in start.0..start.0 + count {
                    active.remove(&g);
                }
            }
            EventKind::MpOut { gfn, .. } if active.contains(&gfn.0) => bad.push((ev.seq, *gfn)),
            _ => {}
        }
    }
    bad
}
