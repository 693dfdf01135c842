// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;

use elasmem::report::FILES;
use elasmem::sim::{run, RunOptions, RunOutcome};
use elasmem::trace::Trace;
use elasmem::{MetricsReport, SimConfig};
use elasmem_core::swap::Watermarks;

fn cfg(pairs: &[(&str, &str)]) -> SimConfig {
    let mut c = SimConfig::default();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

fn replay(c: &SimConfig) -> RunOutcome {
    let trace = c.generate_trace().unwrap();
    let out = run(c, &trace, RunOptions::default()).unwrap();
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    out
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    FILES
        .iter()
        .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn same_seed_gives_identical_csvs() {
    let c = cfg(&[("trace.duration_ms", "200"), ("trace.spikes", "120:30:0.2")]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    replay(&c).report.export(a.path()).unwrap();
    replay(&c).report.export(b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));

    let other = cfg(&[
        ("trace.duration_ms", "200"),
        ("trace.spikes", "120:30:0.2"),
        ("seed", "2"),
    ]);
    let d = tempfile::tempdir().unwrap();
    replay(&other).report.export(d.path()).unwrap();
    assert_ne!(read_all(a.path()), read_all(d.path()));
}

#[test]
fn export_then_load_round_trips() {
    let c = cfg(&[("trace.duration_ms", "150"), ("trace.cold_prob", "0.05")]);
    let out = replay(&c);
    assert!(out.report.summary.faults > 0);
    let dir = tempfile::tempdir().unwrap();
    out.report.export(dir.path()).unwrap();
    assert_eq!(MetricsReport::load(dir.path()).unwrap(), out.report);
}

#[test]
fn empty_run_writes_headers_only() {
    let c = cfg(&[("trace.duration_ms", "0")]);
    let out = run(&c, &Trace::default(), RunOptions::default()).unwrap();
    assert!(out.violations.is_empty());
    assert_eq!(out.report.summary.rounds, 0);
    let dir = tempfile::tempdir().unwrap();
    out.report.export(dir.path()).unwrap();
    for f in FILES {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        let lines = text.lines().count();
        if f == "summary.csv" {
            assert_eq!(lines, 2, "{f}");
        } else {
            assert_eq!(lines, 1, "{f}");
        }
    }
    assert_eq!(MetricsReport::load(dir.path()).unwrap(), out.report);
}

#[test]
fn all_zero_corpus_stores_no_payload() {
    let c = cfg(&[("corpus.zero_ratio", "1.0"), ("trace.duration_ms", "200")]);
    let s = replay(&c).report.summary;
    assert!(s.swapped_ms > 0);
    assert_eq!(s.payload_bytes, 0);
    assert_eq!(s.compressed_mp, 0);
    assert_eq!(s.freed_bytes, s.swapped_ms * 64 * 1024);
}

#[test]
fn steady_hot_set_leaves_the_rest_cold() {
    let c = cfg(&[
        ("trace.duration_ms", "600"),
        ("trace.hot_fraction", "0.3"),
        ("trace.dma_per_ms", "0"),
    ]);
    let s = replay(&c).report.summary;
    assert!(
        (s.final_cold_ratio - 0.7).abs() < 0.05,
        "final cold ratio {}",
        s.final_cold_ratio
    );
    assert_eq!(s.ooms, 0);
}

#[test]
fn spike_pushes_free_below_low() {
    let c = cfg(&[("trace.duration_ms", "400"), ("trace.spikes", "250:5:0.25")]);
    let low = c
        .watermarks()
        .unwrap()
        .unwrap_or(Watermarks::default_for(c.phys_ms))
        .low;
    let out = replay(&c);
    let s = &out.report.summary;
    assert_eq!(s.ooms, 0);
    assert!(s.min_free_ms < low, "min free {} low {low}", s.min_free_ms);
    assert!(s.faults > 0);
    assert!(out.report.samples.iter().any(|x| x.reclaim_state != "idle"));
}

#[test]
fn upgrade_mid_run_keeps_every_op() {
    let c = cfg(&[
        ("trace.duration_ms", "200"),
        ("upgrade.target", "2"),
        ("trace.spikes", "100:20:0.2"),
    ]);
    let trace = c.generate_trace().unwrap();
    let out = run(&c, &trace, RunOptions::default()).unwrap();
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    let s = &out.report.summary;
    assert_eq!(s.dispatch_version, 2);
    assert!(s.upgrade_cut_ok);
    let touches = trace
        .events
        .iter()
        .filter(|e| matches!(e.kind, elasmem::trace::TraceKind::Touch))
        .count() as u64;
    assert_eq!(s.accesses, touches);
}
