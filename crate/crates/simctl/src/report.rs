// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Run metrics and their CSV files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::SimError;

/// One timeline sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time_ns: u64,
    pub free_ms: u64,
    pub resident_ms: u64,
    pub swapped_mp: u64,
    pub cold_ratio: f64,
    pub reclaim_state: String,
    pub zero_ratio: f64,
    pub compression_ratio: f64,
    pub footprint_bytes: u64,
    pub freed_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRow {
    pub time_ns: u64,
    pub worker: u32,
    pub gfn: u64,
    pub mp: u32,
    pub latency_ns: u64,
    /// `zero` or `compressed`.
    pub source: String,
    /// `winner` or `waiter`.
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedRow {
    pub pcpu: usize,
    pub cycle: u64,
    pub class: String,
    pub task: String,
    pub used_us: f64,
    pub granted_us: f64,
    pub penalty: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRow {
    pub seq: u64,
    pub time_ns: u64,
    pub kind: String,
    pub gfn: Option<u64>,
    pub mp: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmarRow {
    pub time_ns: u64,
    pub gfn: u64,
    pub mp: u64,
    pub recovered: bool,
    pub crc_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanRow {
    pub time_ns: u64,
    pub worker: usize,
    pub scan_index: u64,
    /// Sizes from the hottest level to the coldest, `;`-separated.
    pub level_sizes: String,
    pub promotions: usize,
    pub demotions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub duration_ns: u64,
    pub rounds: u64,
    pub accesses: u64,
    pub hits: u64,
    pub populates: u64,
    pub faults: u64,
    pub zero_faults: u64,
    pub compressed_faults: u64,
    pub waiter_faults: u64,
    pub fault_p50_ns: u64,
    pub fault_p90_ns: u64,
    pub fault_p99_ns: u64,
    pub zero_fault_p90_ns: u64,
    pub mp_out: u64,
    pub mp_in: u64,
    pub reclaims: u64,
    pub allocs: u64,
    pub swapped_ms: u64,
    pub zero_mp: u64,
    pub compressed_mp: u64,
    pub payload_bytes: u64,
    pub freed_bytes: u64,
    pub req_metadata_bytes: u64,
    pub ooms: u64,
    pub dmar_events: u64,
    pub dmar_recovered: u64,
    pub dma_violations: u64,
    pub exclusion_violations: u64,
    pub mean_cold_ratio: f64,
    pub final_cold_ratio: f64,
    pub min_free_ms: u64,
    pub max_resident_ms: u64,
    pub phys_ms: u64,
    pub watermark_transitions: u64,
    pub share_vcpu: f64,
    pub share_fcpu: f64,
    pub share_back: f64,
    pub share_idle: f64,
    pub dispatch_version: u32,
    pub upgrade_cut_ok: bool,
}

pub const SUMMARY_HEADER: &[&str] = &[
    "seed",
    "duration_ns",
    "rounds",
    "accesses",
    "hits",
    "populates",
    "faults",
    "zero_faults",
    "compressed_faults",
    "waiter_faults",
    "fault_p50_ns",
    "fault_p90_ns",
    "fault_p99_ns",
    "zero_fault_p90_ns",
    "mp_out",
    "mp_in",
    "reclaims",
    "allocs",
    "swapped_ms",
    "zero_mp",
    "compressed_mp",
    "payload_bytes",
    "freed_bytes",
    "req_metadata_bytes",
    "ooms",
    "dmar_events",
    "dmar_recovered",
    "dma_violations",
    "exclusion_violations",
    "mean_cold_ratio",
    "final_cold_ratio",
    "min_free_ms",
    "max_resident_ms",
    "phys_ms",
    "watermark_transitions",
    "share_vcpu",
    "share_fcpu",
    "share_back",
    "share_idle",
    "dispatch_version",
    "upgrade_cut_ok",
];
pub const METRICS_HEADER: &[&str] = &[
    "time_ns",
    "free_ms",
    "resident_ms",
    "swapped_mp",
    "cold_ratio",
    "reclaim_state",
    "zero_ratio",
    "compression_ratio",
    "footprint_bytes",
    "freed_bytes",
];
pub const FAULTS_HEADER: &[&str] = &[
    "time_ns",
    "worker",
    "gfn",
    "mp",
    "latency_ns",
    "source",
    "role",
];
pub const SCHED_HEADER: &[&str] = &[
    "pcpu",
    "cycle",
    "class",
    "task",
    "used_us",
    "granted_us",
    "penalty",
];
pub const EVENTS_HEADER: &[&str] = &["seq", "time_ns", "kind", "gfn", "mp", "detail"];
pub const DMAR_HEADER: &[&str] = &["time_ns", "gfn", "mp", "recovered", "crc_ok"];
pub const SCANS_HEADER: &[&str] = &[
    "time_ns",
    "worker",
    "scan_index",
    "level_sizes",
    "promotions",
    "demotions",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub summary: Summary,
    pub samples: Vec<Sample>,
    pub faults: Vec<FaultRow>,
    pub sched: Vec<SchedRow>,
    pub events: Vec<EventRow>,
    pub dmar: Vec<DmarRow>,
    pub scans: Vec<ScanRow>,
}

/// Nearest-rank percentile of an ascending slice; 0 when empty.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>, SimError> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(SimError::Format(format!(
            "{}: header {got:?}, expected {header:?}",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub const FILES: [&str; 7] = [
    "summary.csv",
    "metrics.csv",
    "faults.csv",
    "sched.csv",
    "events.csv",
    "dmar.csv",
    "scans.csv",
];

impl MetricsReport {
    pub fn export(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir)?;
        write_rows(
            &dir.join("summary.csv"),
            SUMMARY_HEADER,
            std::slice::from_ref(&self.summary),
        )?;
        write_rows(&dir.join("metrics.csv"), METRICS_HEADER, &self.samples)?;
        write_rows(&dir.join("faults.csv"), FAULTS_HEADER, &self.faults)?;
        write_rows(&dir.join("sched.csv"), SCHED_HEADER, &self.sched)?;
        write_rows(&dir.join("events.csv"), EVENTS_HEADER, &self.events)?;
        write_rows(&dir.join("dmar.csv"), DMAR_HEADER, &self.dmar)?;
        write_rows(&dir.join("scans.csv"), SCANS_HEADER, &self.scans)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SimError> {
        let mut summary: Vec<Summary> = read_rows(&dir.join("summary.csv"), SUMMARY_HEADER)?;
        if summary.len() != 1 {
            return Err(SimError::Format(format!(
                "summary.csv has {} rows",
                summary.len()
            )));
        }
        Ok(Self {
            summary: summary.remove(0),
            samples: read_rows(&dir.join("metrics.csv"), METRICS_HEADER)?,
            faults: read_rows(&dir.join("faults.csv"), FAULTS_HEADER)?,
            sched: read_rows(&dir.join("sched.csv"), SCHED_HEADER)?,
            events: read_rows(&dir.join("events.csv"), EVENTS_HEADER)?,
            dmar: read_rows(&dir.join("dmar.csv"), DMAR_HEADER)?,
            scans: read_rows(&dir.join("scans.csv"), SCANS_HEADER)?,
        })
    }

    /// Human-readable key facts.
    pub fn describe(&self) -> String {
        let s = &self.summary;
        format!(
            "duration {:.3} ms, {} accesses, {} faults (p50 {} ns, p90 {} ns, p99 {} ns)\n\
             swapped {} MS, freed {} bytes, backend payload {} bytes, req metadata {} bytes\n\
             cold ratio mean {:.4} final {:.4}, min free {} MS, max resident {} of {} MS\n\
             ooms {}, dmar {} (recovered {}), dma violations {}, dispatch v{}\n\
             shares vcpu {:.4} fcpu {:.4} back {:.4} idle {:.4}",
            s.duration_ns as f64 / 1e6,
            s.accesses,
            s.faults,
            s.fault_p50_ns,
            s.fault_p90_ns,
            s.fault_p99_ns,
            s.swapped_ms,
            s.freed_bytes,
            s.payload_bytes,
            s.req_metadata_bytes,
            s.mean_cold_ratio,
            s.final_cold_ratio,
            s.min_free_ms,
            s.max_resident_ms,
            s.phys_ms,
            s.ooms,
            s.dmar_events,
            s.dmar_recovered,
            s.dma_violations,
            s.dispatch_version,
            s.share_vcpu,
            s.share_fcpu,
            s.share_back,
            s.share_idle,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_of<T: Serialize>(row: &T) -> Vec<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row).unwrap();
        let bytes = w.into_inner().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        text.lines()
            .next()
            .unwrap()
            .split(',')
            .map(str::to_string)
            .collect()
    }

    #[test]
    fn headers_match_field_order() {
        assert_eq!(header_of(&Summary::default()), SUMMARY_HEADER);
        let sample = Sample {
            time_ns: 0,
            free_ms: 0,
            resident_ms: 0,
            swapped_mp: 0,
            cold_ratio: 0.0,
            reclaim_state: "idle".into(),
            zero_ratio: 0.0,
            compression_ratio: 0.0,
            footprint_bytes: 0,
            freed_bytes: 0,
        };
        assert_eq!(header_of(&sample), METRICS_HEADER);
        let f = FaultRow {
            time_ns: 0,
            worker: 0,
            gfn: 0,
            mp: 0,
            latency_ns: 0,
            source: "zero".into(),
            role: "winner".into(),
        };
        assert_eq!(header_of(&f), FAULTS_HEADER);
        let s = SchedRow {
            pcpu: 0,
            cycle: 0,
            class: "vcpu".into(),
            task: "t".into(),
            used_us: 0.0,
            granted_us: 0.0,
            penalty: 0,
        };
        assert_eq!(header_of(&s), SCHED_HEADER);
        let e = EventRow {
            seq: 0,
            time_ns: 0,
            kind: "k".into(),
            gfn: Some(1),
            mp: Some(1),
            detail: "d".into(),
        };
        assert_eq!(header_of(&e), EVENTS_HEADER);
        let d = DmarRow {
            time_ns: 0,
            gfn: 0,
            mp: 0,
            recovered: true,
            crc_ok: true,
        };
        assert_eq!(header_of(&d), DMAR_HEADER);
        let r = ScanRow {
            time_ns: 0,
            worker: 0,
            scan_index: 0,
            level_sizes: "1;2".into(),
            promotions: 0,
            demotions: 0,
        };
        assert_eq!(header_of(&r), SCANS_HEADER);
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 90.0), 90);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&v, 100.0), 100);
        assert_eq!(percentile(&[7], 1.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
    }
}
