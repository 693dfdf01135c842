// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Trace replay on a full engine driven by the cycle scheduler.
//!
//! Each trace worker is a VCPU task; reclaim and LRU scanning are BACK
//! tasks. Tasks report through a channel that the orchestrator drains after
//! every scheduling round. In simulated time every operation costs what the
//! cost model says, so a fixed config, trace and seed give identical output.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use elasmem_core::backend::PageSource;
use elasmem_core::dma_guard::DmaAccess;
use elasmem_core::events::{Event, EventKind};
use elasmem_core::hot_upgrade::{check_version_cut, DispatchTable, LoopEntry, Shell, WorkerLoop};
use elasmem_core::scheduler::{Class, CycleReport, Scheduler, Task};
use elasmem_core::swap::{FaultResult, FaultRole};
use elasmem_core::{AccessOutcome, Engine, EngineError, Gfn};

use crate::config::{CostModel, SimConfig};
use crate::corpus::Corpus;
use crate::report::{
    percentile, DmarRow, EventRow, FaultRow, MetricsReport, Sample, ScanRow, SchedRow, Summary,
};
use crate::trace::{Trace, TraceEvent, TraceKind};
use crate::SimError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Measure latencies and task time with the host clock.
    pub wall_clock: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: MetricsReport,
    /// Problems found at quiescence or reported by tasks.
    pub violations: Vec<String>,
}

impl RunOutcome {
    /// 0 on a clean run, 2 on an invariant violation, 3 on OOM when
    /// `fail_on_oom` is set.
    pub fn exit_code(&self, fail_on_oom: bool) -> i32 {
        if !self.violations.is_empty() {
            2
        } else if fail_on_oom && self.report.summary.ooms > 0 {
            3
        } else {
            0
        }
    }
}

#[derive(Debug)]
enum Record {
    Hit,
    Populate,
    DmaPopulate,
    Fault(FaultRow),
    Scan(ScanRow),
    Oom,
    Failure(String),
}

struct Ctx {
    engine: Arc<Engine>,
    shell: Arc<Shell>,
    via_shell: bool,
    corpus: Corpus,
    cost: CostModel,
    wall: bool,
    mps: usize,
    remaining: AtomicUsize,
    /// Sections with a fault-in in progress, completed in the background.
    refill: Mutex<VecDeque<Gfn>>,
}

impl Ctx {
    fn access(&self, gfn: Gfn, mp: usize) -> Result<AccessOutcome, EngineError> {
        if self.via_shell {
            self.shell.fault(gfn, mp).0
        } else {
            self.engine.access(gfn, mp)
        }
    }

    fn dma(&self, gfn: Gfn, mp: usize) -> Result<DmaAccess, EngineError> {
        if self.via_shell {
            self.shell.dma(gfn, mp).0
        } else {
            self.engine.dma_access(gfn, mp)
        }
    }

    fn fault_cost(&self, f: &FaultResult) -> u64 {
        let base = match f.source {
            PageSource::Zero => self.cost.zero_fault_ns,
            PageSource::Compressed => self.cost.compressed_fault_ns,
        };
        base + if f.role == FaultRole::Waiter {
            self.cost.waiter_ns
        } else {
            0
        }
    }

    /// First touch of a section maps it and fills it from the corpus.
    fn ensure_populated(&self, gfn: Gfn) -> Result<bool, EngineError> {
        if !self.engine.space().is_unpopulated(gfn)? {
            return Ok(false);
        }
        if let AccessOutcome::Populated = self.access(gfn, 0)? {
            for mp in 0..self.mps {
                if let Some(bytes) = self.corpus.page(gfn, mp) {
                    self.engine.space().write_mp(gfn, mp, &bytes)?;
                }
            }
            return Ok(true);
        }
        Ok(false)
    }
}

fn report_error(tx: &Sender<Record>, e: EngineError) {
    let _ = tx.send(if e.is_oom() {
        Record::Oom
    } else {
        Record::Failure(e.to_string())
    });
}

struct Worker {
    id: usize,
    name: String,
    queue: VecDeque<TraceEvent>,
    ctx: Arc<Ctx>,
    tx: Sender<Record>,
}

impl Worker {
    fn exec(&mut self, ev: TraceEvent, t: Duration) -> Duration {
        let ctx = &self.ctx;
        ctx.engine.events().set_time(t.as_nanos() as u64);
        let start = Instant::now();
        let gfn = Gfn(ev.gfn);
        let mp = ev.mp as usize;
        let mut cost = 0;
        if matches!(ev.kind, TraceKind::Touch | TraceKind::DmaTouch) {
            match ctx.ensure_populated(gfn) {
                Ok(true) => {
                    cost += ctx.cost.populate_ns;
                    if ev.kind == TraceKind::Touch {
                        let _ = self.tx.send(Record::Populate);
                        return self.spent(start, cost);
                    }
                    let _ = self.tx.send(Record::DmaPopulate);
                }
                Ok(false) => {}
                Err(e) => {
                    report_error(&self.tx, e);
                    return self.spent(start, cost + ctx.cost.hit_ns);
                }
            }
        }
        match ev.kind {
            TraceKind::Touch => match ctx.access(gfn, mp) {
                Ok(AccessOutcome::Hit) => {
                    cost += ctx.cost.hit_ns;
                    let _ = self.tx.send(Record::Hit);
                }
                Ok(AccessOutcome::Populated) => {
                    cost += ctx.cost.populate_ns;
                    let _ = self.tx.send(Record::Populate);
                }
                Ok(AccessOutcome::Fault(f)) => {
                    if f.allocated && !f.merged {
                        ctx.refill.lock().unwrap().push_back(gfn);
                    }
                    let modeled = ctx.fault_cost(&f);
                    let latency = if ctx.wall {
                        f.latency.as_nanos() as u64
                    } else {
                        modeled
                    };
                    cost += modeled;
                    let _ = self.tx.send(Record::Fault(FaultRow {
                        time_ns: t.as_nanos() as u64,
                        worker: ev.worker,
                        gfn: gfn.0,
                        mp: ev.mp,
                        latency_ns: latency,
                        source: f.source.to_string(),
                        role: if f.role == FaultRole::Winner {
                            "winner"
                        } else {
                            "waiter"
                        }
                        .into(),
                    }));
                }
                Err(e) => report_error(&self.tx, e),
            },
            TraceKind::DmaTouch => match ctx.dma(gfn, mp) {
                Ok(DmaAccess::Recovered(_)) => {
                    ctx.refill.lock().unwrap().push_back(gfn);
                    cost += ctx.cost.dma_ns + ctx.cost.compressed_fault_ns;
                }
                Ok(DmaAccess::Ok) => cost += ctx.cost.dma_ns,
                Ok(DmaAccess::Violation) => {
                    cost += ctx.cost.dma_ns;
                    let _ = self.tx.send(Record::Failure(format!(
                        "dma violation at gfn {gfn} mp {mp}"
                    )));
                }
                Err(e) => report_error(&self.tx, e),
            },
            TraceKind::SpikeBegin | TraceKind::SpikeEnd => {}
        }
        self.spent(start, cost)
    }

    fn spent(&self, start: Instant, modeled: u64) -> Duration {
        if self.ctx.wall {
            start.elapsed()
        } else {
            Duration::from_nanos(modeled)
        }
    }
}

impl Task for Worker {
    fn name(&self) -> &str {
        &self.name
    }

    fn run(&mut self, grant: Duration, now: Duration) -> Duration {
        self.ctx.shell.boundary(self.id);
        let mut used = Duration::ZERO;
        while used < grant {
            let Some(ev) = self.queue.front().copied() else {
                break;
            };
            let t = now + used;
            if ev.time_ns > t.as_nanos() as u64 {
                break;
            }
            self.queue.pop_front();
            self.ctx.remaining.fetch_sub(1, Ordering::Relaxed);
            used += self.exec(ev, t);
        }
        used
    }

    fn runnable(&self) -> bool {
        !self.queue.is_empty()
    }
}

struct Reclaimer {
    ctx: Arc<Ctx>,
    batch: usize,
}

impl Task for Reclaimer {
    fn name(&self) -> &str {
        "reclaim"
    }

    fn run(&mut self, grant: Duration, now: Duration) -> Duration {
        let ctx = &self.ctx;
        let start = Instant::now();
        let mut cost = ctx.cost.tick_ns;
        for _ in 0..self.batch {
            ctx.engine
                .events()
                .set_time((now + Duration::from_nanos(cost)).as_nanos() as u64);
            let before = ctx.engine.swap_stats().mp_out;
            let (d, out) = if ctx.via_shell {
                ctx.shell.reclaim(1).0
            } else {
                ctx.engine.reclaim_step(1)
            };
            cost += (ctx.engine.swap_stats().mp_out - before) * ctx.cost.swap_out_mp_ns;
            if d.target_ms == 0 || out.candidates == 0 || Duration::from_nanos(cost) >= grant {
                break;
            }
        }
        if ctx.wall {
            start.elapsed()
        } else {
            Duration::from_nanos(cost)
        }
    }
}

/// Restores the rest of each section after its first fault.
struct Refiller {
    ctx: Arc<Ctx>,
}

impl Task for Refiller {
    fn name(&self) -> &str {
        "refill"
    }

    fn run(&mut self, grant: Duration, now: Duration) -> Duration {
        let ctx = &self.ctx;
        let start = Instant::now();
        let mut cost = 0;
        while Duration::from_nanos(cost) < grant {
            let Some(gfn) = ctx.refill.lock().unwrap().pop_front() else {
                break;
            };
            ctx.engine.events().set_time(now.as_nanos() as u64 + cost);
            let r = if ctx.via_shell {
                ctx.shell.invoke(|_, e| e.swap().prefetch_in(gfn)).0
            } else {
                ctx.engine.swap().prefetch_in(gfn)
            };
            cost += ctx.cost.tick_ns;
            if let Ok(p) = r {
                cost += p.restored as u64 * ctx.cost.prefetch_mp_ns;
            }
        }
        if ctx.wall {
            start.elapsed()
        } else {
            Duration::from_nanos(cost)
        }
    }

    fn runnable(&self) -> bool {
        !self.ctx.refill.lock().unwrap().is_empty()
    }
}

struct Scanner {
    ctx: Arc<Ctx>,
    period: Duration,
    next: Duration,
    workers: usize,
    tx: Sender<Record>,
}

impl Task for Scanner {
    fn name(&self) -> &str {
        "scan"
    }

    fn run(&mut self, _grant: Duration, now: Duration) -> Duration {
        if now < self.next {
            return Duration::ZERO;
        }
        while self.next <= now {
            self.next += self.period;
        }
        let ctx = &self.ctx;
        let start = Instant::now();
        let mut cost = 0;
        for w in 0..self.workers {
            ctx.engine.events().set_time(now.as_nanos() as u64 + cost);
            let r = if ctx.via_shell {
                ctx.shell.scan(w).0
            } else {
                ctx.engine.scan_tick(w)
            };
            cost += ctx.cost.tick_ns + r.scanned as u64 * ctx.cost.scan_ms_ns;
            let _ = self.tx.send(Record::Scan(ScanRow {
                time_ns: now.as_nanos() as u64,
                worker: w,
                scan_index: r.scan_index,
                level_sizes: r
                    .level_sizes
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                promotions: r.promotions,
                demotions: r.demotions,
            }));
        }
        if ctx.wall {
            start.elapsed()
        } else {
            Duration::from_nanos(cost)
        }
    }
}

fn table_for(version: u32) -> DispatchTable {
    match version {
        2 => DispatchTable::v2(),
        _ => DispatchTable::v1(),
    }
}

#[derive(Default)]
struct Tally {
    hits: u64,
    populates: u64,
    dma_populates: u64,
    ooms: u64,
    faults: Vec<FaultRow>,
    scans: Vec<ScanRow>,
    failures: Vec<String>,
}

impl Tally {
    fn drain(&mut self, rx: &Receiver<Record>) {
        for r in rx.try_iter() {
            match r {
                Record::Hit => self.hits += 1,
                Record::Populate => self.populates += 1,
                Record::DmaPopulate => self.dma_populates += 1,
                Record::Fault(f) => self.faults.push(f),
                Record::Scan(s) => self.scans.push(s),
                Record::Oom => self.ooms += 1,
                Record::Failure(m) => self.failures.push(m),
            }
        }
    }
}

fn sample(engine: &Engine, time_ns: u64) -> Sample {
    let c = engine.space().counters();
    let b = engine.backend().stats();
    Sample {
        time_ns,
        free_ms: c.free_ms,
        resident_ms: c.resident_ms,
        swapped_mp: c.swapped_mp,
        cold_ratio: engine.cold_ratio(),
        reclaim_state: engine.reclaim_state().to_string(),
        zero_ratio: b.zero_ratio(),
        compression_ratio: b.compression_ratio(engine.space().mp_size() as u64),
        footprint_bytes: b.footprint_bytes(),
        freed_bytes: engine.swap().freed_bytes(),
    }
}

fn event_row(e: &Event) -> EventRow {
    EventRow {
        seq: e.seq,
        time_ns: e.time_ns,
        kind: e.kind.name().to_string(),
        gfn: e.kind.gfn().map(|g| g.0),
        mp: e.kind.mp().map(|m| m as u64),
        detail: e.kind.detail(),
    }
}

fn sched_rows(rep: &CycleReport, out: &mut Vec<SchedRow>) {
    for r in &rep.rows {
        out.push(SchedRow {
            pcpu: rep.pcpu,
            cycle: rep.cycle,
            class: r.class.to_string(),
            task: r.name.clone(),
            used_us: r.used.as_nanos() as f64 / 1e3,
            granted_us: r.granted.as_nanos() as f64 / 1e3,
            penalty: r.penalty,
        });
    }
}

/// Boots an engine from `cfg` and replays `trace` on it.
pub fn run(cfg: &SimConfig, trace: &Trace, opts: RunOptions) -> Result<RunOutcome, SimError> {
    cfg.validate()?;
    let engine = Arc::new(Engine::new(cfg.engine_config()?)?);
    let layout = cfg.layout(engine.space().metadata_ms());
    trace.check(&layout)?;
    let workers = trace.workers().max(cfg.trace.workers);
    let shell = Arc::new(Shell::new(engine.clone(), DispatchTable::v1(), workers));
    let corpus = Corpus::new(cfg.corpus, engine.space().mp_size(), cfg.seed)?;
    let ctx = Arc::new(Ctx {
        engine: engine.clone(),
        shell: shell.clone(),
        via_shell: cfg.upgrade_target > 0,
        corpus,
        cost: cfg.cost,
        wall: opts.wall_clock,
        mps: layout.mps_per_ms,
        remaining: AtomicUsize::new(trace.len()),
        refill: Mutex::new(VecDeque::new()),
    });

    let sched_cfg = cfg.sched_config();
    let sched = Scheduler::new(sched_cfg.clone())?;
    let (tx, rx) = channel();
    let mut queues: Vec<VecDeque<TraceEvent>> = vec![VecDeque::new(); workers];
    for ev in &trace.events {
        queues[ev.worker as usize].push_back(*ev);
    }
    for (id, queue) in queues.into_iter().enumerate() {
        let w = Worker {
            id,
            name: format!("worker-{id}"),
            queue,
            ctx: ctx.clone(),
            tx: tx.clone(),
        };
        sched.enqueue(id % cfg.pcpus, Class::Vcpu, Box::new(w))?;
    }
    let back = &sched_cfg.back_allowed;
    let scan_period = Duration::from_micros(cfg.scan_period_us);
    let scanner = Scanner {
        ctx: ctx.clone(),
        period: scan_period,
        next: scan_period,
        workers: cfg.lru.workers,
        tx,
    };
    sched.enqueue(back[0], Class::Back, Box::new(scanner))?;
    sched.enqueue(
        back[0],
        Class::Back,
        Box::new(Refiller { ctx: ctx.clone() }),
    )?;
    let reclaimer = Reclaimer {
        ctx: ctx.clone(),
        batch: cfg.reclaim_batch,
    };
    sched.enqueue(back[back.len() - 1], Class::Back, Box::new(reclaimer))?;

    let end_ns = trace.end_ns().max(cfg.trace.duration_ms * 1_000_000);
    let sample_ns = cfg.sample_us * 1_000;
    let upgrade_at = (cfg.upgrade_target > 0).then(|| {
        cfg.upgrade_at_ms
            .map(|ms| ms * 1_000_000)
            .or_else(|| trace.spike_starts().first().copied())
            .unwrap_or(end_ns / 2)
    });
    // Generous bound on rounds so a stuck backlog cannot spin forever.
    let max_rounds = 100 * (end_ns / (cfg.cycle_us * 1_000)).max(1) + 10_000;

    let mut tally = Tally::default();
    let mut samples = Vec::new();
    let mut sched_out = Vec::new();
    let mut class_time = [Duration::ZERO; 4];
    let mut next_sample = 0u64;
    let mut rounds = 0u64;
    let mut upgrade_done = false;
    let mut violations = Vec::new();
    let clock = |s: &Scheduler| {
        (0..cfg.pcpus)
            .map(|p| s.clock(p))
            .max()
            .unwrap_or_default()
            .as_nanos() as u64
    };

    loop {
        let now = clock(&sched);
        let drained =
            ctx.remaining.load(Ordering::Relaxed) == 0 && ctx.refill.lock().unwrap().is_empty();
        if drained && now >= end_ns {
            break;
        }
        if rounds >= max_rounds {
            violations.push(format!("trace not drained after {rounds} rounds"));
            break;
        }
        if now >= next_sample {
            samples.push(sample(&engine, now));
            while next_sample <= now {
                next_sample += sample_ns;
            }
        }
        if let Some(at) = upgrade_at.filter(|at| !upgrade_done && now >= *at) {
            engine.events().set_time(at.max(now));
            let loops: Vec<Arc<dyn WorkerLoop>> = (0..workers)
                .map(|_| Arc::new(LoopEntry(cfg.upgrade_target)) as Arc<dyn WorkerLoop>)
                .collect();
            let ticket = shell.stage_upgrade(table_for(cfg.upgrade_target), loops)?;
            let rep = shell.commit_upgrade(ticket, Duration::from_secs(5), Duration::ZERO)?;
            if !rep.state_preserved() {
                violations.push("engine state changed across the upgrade".into());
            }
            upgrade_done = true;
        }
        for rep in sched.run_round() {
            for c in Class::ALL {
                class_time[c.index()] += rep.used(c);
            }
            sched_rows(&rep, &mut sched_out);
        }
        tally.drain(&rx);
        rounds += 1;
    }
    tally.drain(&rx);
    let end = clock(&sched);
    if rounds > 0 {
        samples.push(sample(&engine, end));
    }
    // Workers leave their loops through the boundary at shutdown.
    for w in 0..workers {
        shell.boundary(w);
    }

    if let Err(e) = engine.check_invariants() {
        violations.push(e);
    }
    let b = engine.backend().stats();
    let c = engine.space().counters();
    if c.swapped_mp != b.zero_mp + b.compressed_mp {
        violations.push(format!(
            "swapped {} MPs but backend holds {} + {}",
            c.swapped_mp, b.zero_mp, b.compressed_mp
        ));
    }
    let swapped_ms = engine.swap().fully_swapped_count() as u64;
    let freed = engine.swap().freed_bytes();
    if freed != swapped_ms * engine.geometry().ms_size {
        violations.push(format!(
            "freed {freed} bytes for {swapped_ms} swapped sections"
        ));
    }
    violations.extend(tally.failures.iter().cloned());

    let events = engine.events().snapshot();
    let cut_ok = match upgrade_at {
        Some(_) if cfg.record_events => {
            let r = check_version_cut(&events, 1, cfg.upgrade_target);
            if let Err(e) = &r {
                violations.push(format!("version cut: {e}"));
            }
            r.is_ok() && shell.pending_workers().is_empty()
        }
        Some(_) => shell.pending_workers().is_empty(),
        None => true,
    };

    let mut lat: Vec<u64> = tally.faults.iter().map(|f| f.latency_ns).collect();
    lat.sort_unstable();
    let mut zero_lat: Vec<u64> = tally
        .faults
        .iter()
        .filter(|f| f.source == "zero")
        .map(|f| f.latency_ns)
        .collect();
    zero_lat.sort_unstable();
    let total_time: Duration = class_time.iter().sum();
    let share = |c: Class| {
        if total_time.is_zero() {
            0.0
        } else {
            class_time[c.index()].as_secs_f64() / total_time.as_secs_f64()
        }
    };
    let s = engine.swap_stats();
    let d = engine.dma_stats();
    let dmar: Vec<DmarRow> = events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::Dmar {
                gfn,
                mp,
                recovered,
                crc_ok,
            } => Some(DmarRow {
                time_ns: e.time_ns,
                gfn: gfn.0,
                mp: mp as u64,
                recovered,
                crc_ok,
            }),
            _ => None,
        })
        .collect();
    let watermark_transitions = events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Watermark { .. }))
        .count() as u64;
    let faults = tally.faults.len() as u64;
    let summary = Summary {
        seed: cfg.seed,
        duration_ns: end,
        rounds,
        accesses: tally.hits + faults + tally.populates,
        hits: tally.hits,
        populates: tally.populates + tally.dma_populates,
        faults,
        zero_faults: zero_lat.len() as u64,
        compressed_faults: faults - zero_lat.len() as u64,
        waiter_faults: tally.faults.iter().filter(|f| f.role == "waiter").count() as u64,
        fault_p50_ns: percentile(&lat, 50.0),
        fault_p90_ns: percentile(&lat, 90.0),
        fault_p99_ns: percentile(&lat, 99.0),
        zero_fault_p90_ns: percentile(&zero_lat, 90.0),
        mp_out: s.mp_out,
        mp_in: s.mp_in,
        reclaims: s.reclaims,
        allocs: s.allocs,
        swapped_ms,
        zero_mp: b.zero_mp,
        compressed_mp: b.compressed_mp,
        payload_bytes: b.payload_bytes,
        freed_bytes: freed,
        req_metadata_bytes: engine.swap().req_metadata_bytes(),
        ooms: tally.ooms.max(s.ooms),
        dmar_events: d.dmar_events,
        dmar_recovered: d.recovered,
        dma_violations: d.violations,
        exclusion_violations: s.exclusion_violations,
        mean_cold_ratio: if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|s| s.cold_ratio).sum::<f64>() / samples.len() as f64
        },
        final_cold_ratio: samples.last().map_or(0.0, |s| s.cold_ratio),
        min_free_ms: samples.iter().map(|s| s.free_ms).min().unwrap_or(c.free_ms),
        max_resident_ms: samples
            .iter()
            .map(|s| s.resident_ms)
            .max()
            .unwrap_or(c.resident_ms),
        phys_ms: engine.geometry().phys_ms_count,
        watermark_transitions,
        share_vcpu: share(Class::Vcpu),
        share_fcpu: share(Class::Fcpu),
        share_back: share(Class::Back),
        share_idle: share(Class::Idle),
        dispatch_version: shell.version(),
        upgrade_cut_ok: cut_ok,
    };
    if s.exclusion_violations > 0 {
        violations.push(format!("{} exclusion violations", s.exclusion_violations));
    }
    let report = MetricsReport {
        summary,
        samples,
        faults: tally.faults,
        sched: sched_out,
        events: events.iter().map(event_row).collect(),
        dmar,
        scans: tally.scans,
    };
    Ok(RunOutcome { report, violations })
}
