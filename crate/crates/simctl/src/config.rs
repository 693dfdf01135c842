// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Flat `key = value` simulator configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown and repeated keys are
//! errors. Every key has a default, so an empty file is a valid config.

use std::path::Path;
use std::time::Duration;

use elasmem_core::lru::LruConfig;
use elasmem_core::mem_model::{AddressSpace, Geometry};
use elasmem_core::scheduler::{Class, SchedConfig};
use elasmem_core::swap::Watermarks;
use elasmem_core::EngineConfig;

use crate::corpus::CorpusParams;
use crate::trace::{gen_trace, Trace, TraceLayout, TraceParams};
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 64 KiB sections of 4 KiB pages.
    Scaled,
    /// 2 MiB sections of 4 KiB pages.
    Production,
}

/// Simulated cost of each operation, used when latencies are not measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub hit_ns: u64,
    pub populate_ns: u64,
    pub zero_fault_ns: u64,
    pub compressed_fault_ns: u64,
    /// Added when a fault waited for another task's restore.
    pub waiter_ns: u64,
    pub dma_ns: u64,
    /// Per MP restored by the background refill after a fault.
    pub prefetch_mp_ns: u64,
    pub swap_out_mp_ns: u64,
    pub scan_ms_ns: u64,
    pub tick_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            hit_ns: 100,
            populate_ns: 4_000,
            zero_fault_ns: 2_000,
            compressed_fault_ns: 6_000,
            waiter_ns: 1_000,
            dma_ns: 500,
            prefetch_mp_ns: 1_000,
            swap_out_mp_ns: 1_500,
            scan_ms_ns: 50,
            tick_ns: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub preset: Preset,
    pub phys_ms: u64,
    pub virt_extra_ms: u64,
    pub mpool_bytes: Option<u64>,
    pub wm_min: Option<u64>,
    pub wm_low: Option<u64>,
    pub wm_high: Option<u64>,
    pub early_reclaim: bool,
    pub halt_without_cold: bool,
    pub pcpus: usize,
    pub cycle_us: u64,
    pub ratios: [f64; 4],
    pub back_pcpus: Option<Vec<usize>>,
    pub max_us: [Option<u64>; 4],
    pub penalty_decay: f64,
    pub penalty_cap: u32,
    pub lru: LruConfig,
    pub scan_period_us: u64,
    pub reclaim_batch: usize,
    pub corpus: CorpusParams,
    pub trace: TraceParams,
    pub cost: CostModel,
    pub sample_us: u64,
    pub record_events: bool,
    pub fail_on_oom: bool,
    /// Dispatch version to upgrade to during the run; 0 disables.
    pub upgrade_target: u32,
    /// Upgrade time; defaults to the first spike, else mid-run.
    pub upgrade_at_ms: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let sched = SchedConfig::new(2);
        Self {
            seed: 1,
            preset: Preset::Scaled,
            phys_ms: 256,
            virt_extra_ms: 128,
            mpool_bytes: None,
            wm_min: None,
            wm_low: None,
            wm_high: None,
            early_reclaim: false,
            halt_without_cold: true,
            pcpus: sched.pcpus,
            cycle_us: sched.cycle_period.as_micros() as u64,
            ratios: sched.ratios,
            back_pcpus: None,
            max_us: [None; 4],
            penalty_decay: sched.penalty_decay,
            penalty_cap: sched.penalty_cap,
            lru: LruConfig::default(),
            scan_period_us: 2_000,
            reclaim_batch: 8,
            corpus: CorpusParams::default(),
            trace: TraceParams::default(),
            cost: CostModel::default(),
            sample_us: 1_000,
            record_events: true,
            fail_on_oom: false,
            upgrade_target: 0,
            upgrade_at_ms: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, SimError> {
    v.parse()
        .map_err(|_| SimError::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, SimError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(SimError::Config(format!("{key}: '{v}' is not a boolean"))),
    }
}

fn class_key(name: &str) -> Option<usize> {
    Class::ALL
        .iter()
        .find(|c| c.name() == name)
        .map(|c| c.index())
}

impl SimConfig {
    pub fn from_text(text: &str) -> Result<Self, SimError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(SimError::Config(format!(
                    "line {}: key {k} repeated",
                    n + 1
                )));
            }
            cfg.set(k, v)
                .map_err(|e| SimError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies one key. Used by the file parser and by command-line
    /// overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), SimError> {
        if let Some(c) = key.strip_prefix("sched.ratio.") {
            let i =
                class_key(c).ok_or_else(|| SimError::Config(format!("unknown class in {key}")))?;
            self.ratios[i] = parse(key, v)?;
            return Ok(());
        }
        if let Some(c) = key.strip_prefix("sched.max_us.") {
            let i =
                class_key(c).ok_or_else(|| SimError::Config(format!("unknown class in {key}")))?;
            self.max_us[i] = Some(parse(key, v)?);
            return Ok(());
        }
        match key {
            "seed" => self.seed = parse(key, v)?,
            "geometry.preset" => {
                self.preset = match v {
                    "scaled" => Preset::Scaled,
                    "production" => Preset::Production,
                    _ => {
                        return Err(SimError::Config(format!(
                            "{key}: expected scaled or production"
                        )))
                    }
                }
            }
            "geometry.phys_ms" => self.phys_ms = parse(key, v)?,
            "geometry.virt_extra_ms" => self.virt_extra_ms = parse(key, v)?,
            "mpool.reservation_bytes" => self.mpool_bytes = Some(parse(key, v)?),
            "watermark.min" => self.wm_min = Some(parse(key, v)?),
            "watermark.low" => self.wm_low = Some(parse(key, v)?),
            "watermark.high" => self.wm_high = Some(parse(key, v)?),
            "watermark.early_reclaim" => self.early_reclaim = parse_bool(key, v)?,
            "watermark.halt_without_cold" => self.halt_without_cold = parse_bool(key, v)?,
            "sched.pcpus" => self.pcpus = parse(key, v)?,
            "sched.cycle_us" => self.cycle_us = parse(key, v)?,
            "sched.back_pcpus" => {
                self.back_pcpus = Some(
                    v.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| parse(key, s))
                        .collect::<Result<_, _>>()?,
                )
            }
            "sched.penalty_decay" => self.penalty_decay = parse(key, v)?,
            "sched.penalty_cap" => self.penalty_cap = parse(key, v)?,
            "lru.levels" => self.lru.levels = parse(key, v)?,
            "lru.stabilize_scans" => self.lru.stabilize_scans = parse(key, v)?,
            "lru.workers" => self.lru.workers = parse(key, v)?,
            "lru.batch" => self.lru.batch = parse(key, v)?,
            "lru.scan_period_us" => self.scan_period_us = parse(key, v)?,
            "reclaim.batch" => self.reclaim_batch = parse(key, v)?,
            "corpus.zero_ratio" => self.corpus.zero_ratio = parse(key, v)?,
            "corpus.compress_target" => self.corpus.compress_target = parse(key, v)?,
            "trace.workers" => self.trace.workers = parse(key, v)?,
            "trace.duration_ms" => self.trace.duration_ms = parse(key, v)?,
            "trace.rate_per_ms" => self.trace.rate_per_ms = parse(key, v)?,
            "trace.hot_fraction" => self.trace.hot_fraction = parse(key, v)?,
            "trace.cold_prob" => self.trace.cold_prob = parse(key, v)?,
            "trace.ramp_ms" => self.trace.ramp_ms = parse(key, v)?,
            "trace.region_ms" => self.trace.region_ms = Some(parse(key, v)?),
            "trace.dma_per_ms" => self.trace.dma_per_ms = parse(key, v)?,
            "trace.spikes" => self.trace.spikes = TraceParams::parse_spikes(v)?,
            "cost.hit_ns" => self.cost.hit_ns = parse(key, v)?,
            "cost.populate_ns" => self.cost.populate_ns = parse(key, v)?,
            "cost.zero_fault_ns" => self.cost.zero_fault_ns = parse(key, v)?,
            "cost.compressed_fault_ns" => self.cost.compressed_fault_ns = parse(key, v)?,
            "cost.waiter_ns" => self.cost.waiter_ns = parse(key, v)?,
            "cost.dma_ns" => self.cost.dma_ns = parse(key, v)?,
            "cost.prefetch_mp_ns" => self.cost.prefetch_mp_ns = parse(key, v)?,
            "cost.swap_out_mp_ns" => self.cost.swap_out_mp_ns = parse(key, v)?,
            "cost.scan_ms_ns" => self.cost.scan_ms_ns = parse(key, v)?,
            "cost.tick_ns" => self.cost.tick_ns = parse(key, v)?,
            "metrics.sample_us" => self.sample_us = parse(key, v)?,
            "events.record" => self.record_events = parse_bool(key, v)?,
            "run.fail_on_oom" => self.fail_on_oom = parse_bool(key, v)?,
            "upgrade.target" => self.upgrade_target = parse(key, v)?,
            "upgrade.at_ms" => self.upgrade_at_ms = Some(parse(key, v)?),
            _ => return Err(SimError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        match self.preset {
            Preset::Scaled => Geometry::scaled(self.phys_ms, self.virt_extra_ms),
            Preset::Production => Geometry::production(self.phys_ms, self.virt_extra_ms),
        }
    }

    pub fn watermarks(&self) -> Result<Option<Watermarks>, SimError> {
        match (self.wm_min, self.wm_low, self.wm_high) {
            (None, None, None) => Ok(None),
            (Some(min), Some(low), Some(high)) => Ok(Some(Watermarks { min, low, high })),
            _ => Err(SimError::Config(
                "watermark.min, .low and .high must be set together".into(),
            )),
        }
    }

    pub fn engine_config(&self) -> Result<EngineConfig, SimError> {
        let mut e = EngineConfig::new(self.geometry());
        e.mpool_reservation = self.mpool_bytes;
        e.lru = self.lru;
        e.watermarks = self.watermarks()?;
        e.early_reclaim = self.early_reclaim;
        e.halt_without_cold = self.halt_without_cold;
        e.record_events = self.record_events;
        Ok(e)
    }

    pub fn sched_config(&self) -> SchedConfig {
        let mut s = SchedConfig::new(self.pcpus);
        s.cycle_period = Duration::from_micros(self.cycle_us);
        s.ratios = self.ratios;
        if let Some(b) = &self.back_pcpus {
            s.back_allowed = b.clone();
        }
        for (i, m) in self.max_us.iter().enumerate() {
            s.max_duration[i] = m.map_or(s.cycle_period, Duration::from_micros);
        }
        s.penalty_decay = self.penalty_decay;
        s.penalty_cap = self.penalty_cap;
        s
    }

    /// Trace placement for an engine with `metadata_ms` pinned sections.
    pub fn layout(&self, metadata_ms: u64) -> TraceLayout {
        let geo = self.geometry();
        let guest = geo.virt_ms_count().saturating_sub(metadata_ms);
        TraceLayout {
            first_gfn: metadata_ms,
            region_ms: self.trace.region_ms.unwrap_or(guest).min(guest),
            mps_per_ms: geo.mps_per_ms(),
        }
    }

    /// Pinned metadata sections of the engine this config boots.
    pub fn metadata_ms(&self) -> Result<u64, SimError> {
        let geo = self.geometry();
        let reservation = self
            .mpool_bytes
            .unwrap_or_else(|| geo.default_mpool_reservation());
        Ok(AddressSpace::new(geo, reservation)?.metadata_ms())
    }

    /// Generates the synthetic trace described by the `trace.*` keys.
    pub fn generate_trace(&self) -> Result<Trace, SimError> {
        gen_trace(&self.trace, &self.layout(self.metadata_ms()?), self.seed)
    }

    /// Checks everything that can be checked without building an engine.
    pub fn validate(&self) -> Result<(), SimError> {
        self.geometry()
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        if let Some(wm) = self.watermarks()? {
            wm.validate(self.phys_ms)
                .map_err(|e| SimError::Config(e.to_string()))?;
        }
        self.sched_config()
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.lru
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        self.corpus.validate()?;
        self.trace.validate()?;
        if self.scan_period_us == 0 || self.sample_us == 0 || self.cycle_us == 0 {
            return Err(SimError::Config("periods must be positive".into()));
        }
        if self.reclaim_batch == 0 {
            return Err(SimError::Config("reclaim.batch must be positive".into()));
        }
        if !matches!(self.upgrade_target, 0 | 2) {
            return Err(SimError::Config(format!(
                "no dispatch table for version {}",
                self.upgrade_target
            )));
        }
        Ok(())
    }
}
