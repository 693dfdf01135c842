// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Synthetic access traces and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::SimError;

pub const TRACE_HEADER: [&str; 5] = ["time_ns", "worker", "kind", "gfn", "mp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Touch,
    DmaTouch,
    SpikeBegin,
    SpikeEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time_ns: u64,
    pub worker: u32,
    pub kind: TraceKind,
    pub gfn: u64,
    pub mp: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spike {
    pub start_ms: u64,
    pub len_ms: u64,
    /// Share of the region walked.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceParams {
    pub workers: usize,
    pub duration_ms: u64,
    /// Steady-phase touches per worker per millisecond.
    pub rate_per_ms: u32,
    pub hot_fraction: f64,
    /// Share of steady touches drawn from the whole region instead of the
    /// hot set.
    pub cold_prob: f64,
    /// First-touch walk over the region at the start of the trace; 0 skips
    /// it.
    pub ramp_ms: u64,
    /// Sections the trace may touch. Defaults to all guest sections.
    pub region_ms: Option<u64>,
    /// Device touches per millisecond across all workers.
    pub dma_per_ms: f64,
    pub spikes: Vec<Spike>,
}

impl Default for TraceParams {
    fn default() -> Self {
        Self {
            workers: 4,
            duration_ms: 400,
            rate_per_ms: 40,
            hot_fraction: 0.3,
            cold_prob: 0.0,
            ramp_ms: 100,
            region_ms: None,
            dma_per_ms: 0.5,
            spikes: Vec::new(),
        }
    }
}

impl TraceParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.workers == 0 {
            return bad("trace.workers must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hot_fraction) {
            return bad(format!(
                "trace.hot_fraction {} outside [0, 1]",
                self.hot_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.cold_prob) {
            return bad(format!("trace.cold_prob {} outside [0, 1]", self.cold_prob));
        }
        if !(self.dma_per_ms >= 0.0 && self.dma_per_ms.is_finite()) {
            return bad(format!(
                "trace.dma_per_ms {} must be non-negative",
                self.dma_per_ms
            ));
        }
        if self.region_ms == Some(0) {
            return bad("trace.region_ms must be positive".into());
        }
        for s in &self.spikes {
            if !(s.fraction > 0.0 && s.fraction <= 1.0) || s.len_ms == 0 {
                return bad(format!("bad spike {s:?}"));
            }
        }
        Ok(())
    }

    /// Parses `start_ms:len_ms:fraction` entries separated by `;`.
    pub fn parse_spikes(s: &str) -> Result<Vec<Spike>, SimError> {
        s.split(';')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                let f: Vec<&str> = p.split(':').collect();
                let err =
                    || SimError::Config(format!("spike '{p}' is not start_ms:len_ms:fraction"));
                if f.len() != 3 {
                    return Err(err());
                }
                Ok(Spike {
                    start_ms: f[0].trim().parse().map_err(|_| err())?,
                    len_ms: f[1].trim().parse().map_err(|_| err())?,
                    fraction: f[2].trim().parse().map_err(|_| err())?,
                })
            })
            .collect()
    }

    pub fn format_spikes(spikes: &[Spike]) -> String {
        spikes
            .iter()
            .map(|s| format!("{}:{}:{}", s.start_ms, s.len_ms, s.fraction))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Where the trace lands in guest memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceLayout {
    pub first_gfn: u64,
    pub region_ms: u64,
    pub mps_per_ms: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn end_ns(&self) -> u64 {
        self.events.last().map_or(0, |e| e.time_ns)
    }

    pub fn workers(&self) -> usize {
        self.events
            .iter()
            .map(|e| e.worker as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Start times of spike markers.
    pub fn spike_starts(&self) -> Vec<u64> {
        self.events
            .iter()
            .filter(|e| e.kind == TraceKind::SpikeBegin)
            .map(|e| e.time_ns)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for e in &self.events {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != TRACE_HEADER {
            return Err(SimError::Trace(format!(
                "trace header {header:?}, expected {TRACE_HEADER:?}"
            )));
        }
        let events: Vec<TraceEvent> = rd.deserialize().collect::<Result<_, _>>()?;
        if let Some(i) = events.windows(2).position(|w| w[1].time_ns < w[0].time_ns) {
            return Err(SimError::Trace(format!(
                "trace row {} goes back in time",
                i + 2
            )));
        }
        Ok(Self { events })
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Checks every event fits the layout.
    pub fn check(&self, layout: &TraceLayout) -> Result<(), SimError> {
        let end = layout.first_gfn + layout.region_ms;
        for (i, e) in self.events.iter().enumerate() {
            if matches!(e.kind, TraceKind::Touch | TraceKind::DmaTouch)
                && (e.gfn < layout.first_gfn || e.gfn >= end || e.mp as usize >= layout.mps_per_ms)
            {
                return Err(SimError::Trace(format!(
                    "event {i} touches gfn {} mp {} outside [{}, {end}) x {}",
                    e.gfn, e.mp, layout.first_gfn, layout.mps_per_ms
                )));
            }
        }
        Ok(())
    }
}

const MS_NS: u64 = 1_000_000;

pub fn gen_trace(params: &TraceParams, layout: &TraceLayout, seed: u64) -> Result<Trace, SimError> {
    params.validate()?;
    if layout.region_ms == 0 || layout.mps_per_ms == 0 {
        return Err(SimError::Config("trace layout is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let region = layout.region_ms;
    let mps = layout.mps_per_ms as u32;
    let workers = params.workers as u32;
    let hot = ((region as f64 * params.hot_fraction).round() as u64).clamp(1, region);
    let mut ev = Vec::new();
    let touch = |time_ns, worker, gfn, mp| TraceEvent {
        time_ns,
        worker,
        kind: TraceKind::Touch,
        gfn,
        mp,
    };

    if params.ramp_ms > 0 {
        let span = params.ramp_ms * MS_NS;
        for i in 0..region {
            ev.push(touch(
                i * span / region,
                (i % workers as u64) as u32,
                layout.first_gfn + i,
                0,
            ));
        }
    }

    for ms in 0..params.duration_ms {
        for w in 0..workers {
            for _ in 0..params.rate_per_ms {
                let t = ms * MS_NS + rng.gen_range(0..MS_NS);
                let off = if rng.gen_bool(params.cold_prob) {
                    rng.gen_range(0..region)
                } else {
                    rng.gen_range(0..hot)
                };
                ev.push(touch(t, w, layout.first_gfn + off, rng.gen_range(0..mps)));
            }
        }
        let n =
            ((ms + 1) as f64 * params.dma_per_ms).floor() - (ms as f64 * params.dma_per_ms).floor();
        for _ in 0..n as u64 {
            ev.push(TraceEvent {
                time_ns: ms * MS_NS + rng.gen_range(0..MS_NS),
                worker: rng.gen_range(0..workers),
                kind: TraceKind::DmaTouch,
                gfn: layout.first_gfn + rng.gen_range(0..region),
                mp: rng.gen_range(0..mps),
            });
        }
    }

    for s in &params.spikes {
        let count = ((region as f64 * s.fraction).round() as u64).clamp(1, region);
        let start = s.start_ms * MS_NS;
        let span = s.len_ms * MS_NS;
        let first = layout.first_gfn + hot % region;
        ev.push(TraceEvent {
            time_ns: start,
            worker: 0,
            kind: TraceKind::SpikeBegin,
            gfn: first,
            mp: 0,
        });
        let steps = count * mps as u64;
        for j in 0..steps {
            let gfn = layout.first_gfn + (hot + j / mps as u64) % region;
            let t = start + j * span / steps;
            ev.push(touch(
                t,
                (j % workers as u64) as u32,
                gfn,
                (j % mps as u64) as u32,
            ));
        }
        ev.push(TraceEvent {
            time_ns: start + span,
            worker: 0,
            kind: TraceKind::SpikeEnd,
            gfn: first,
            mp: 0,
        });
    }

    ev.sort_by_key(|e| (e.time_ns, e.worker));
    Ok(Trace { events: ev })
}
