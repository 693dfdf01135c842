// Copyright 2026 The elasmem Authors
// SPDX-License-Identifier: Apache-2.0

//! Per-PCPU cyclic scheduler with four priority classes.
//!
//! Each cycle gives every class `ratio * cycle_period`. Classes run in
//! priority order and hand unused time down to the next class. Within a
//! class, tasks split the budget evenly; a task's grant shrinks by
//! `penalty_decay^penalty` after it over-runs its class limit. Time left once
//! all classes ran goes to classes that still had unsatisfied demand, in
//! proportion to their ratios, and only the rest is idle.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Vcpu = 0,
    Fcpu = 1,
    Back = 2,
    Idle = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Vcpu, Class::Fcpu, Class::Back, Class::Idle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Vcpu => "vcpu",
            Class::Fcpu => "fcpu",
            Class::Back => "back",
            Class::Idle => "idle",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("invalid scheduler config: {0}")]
    Config(String),
    #[error("pcpu {0} does not exist")]
    NoSuchPcpu(usize),
    #[error("background tasks are not allowed on pcpu {0}")]
    BackNotAllowed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedConfig {
    pub pcpus: usize,
    pub cycle_period: Duration,
    /// Indexed by [`Class::index`]. Must sum to 1.
    pub ratios: [f64; 4],
    pub back_allowed: Vec<usize>,
    /// Longest single run per class before a penalty applies.
    pub max_duration: [Duration; 4],
    /// Grant multiplier per penalty step, in (0, 1).
    pub penalty_decay: f64,
    pub penalty_cap: u32,
}

impl SchedConfig {
    /// 1 ms cycle, 80% / 0% / 15% / 5%, background work on every pcpu.
    pub fn new(pcpus: usize) -> Self {
        let period = Duration::from_millis(1);
        Self {
            pcpus,
            cycle_period: period,
            ratios: [0.80, 0.0, 0.15, 0.05],
            back_allowed: (0..pcpus).collect(),
            max_duration: [period; 4],
            penalty_decay: 0.5,
            penalty_cap: 8,
        }
    }

    pub fn ratio(&self, c: Class) -> f64 {
        self.ratios[c.index()]
    }

    pub fn budget(&self, c: Class) -> Duration {
        self.cycle_period.mul_f64(self.ratio(c))
    }

    pub fn back_allowed_on(&self, pcpu: usize) -> bool {
        self.back_allowed.contains(&pcpu)
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        let bad = |m: String| Err(SchedError::Config(m));
        if self.pcpus == 0 {
            return bad("at least one pcpu required".into());
        }
        if self.cycle_period.is_zero() {
            return bad("cycle period must be positive".into());
        }
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return bad(format!("ratios must be non-negative: {:?}", self.ratios));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("ratios sum to {sum}, not 1"));
        }
        if self.back_allowed.is_empty() {
            return bad("background tasks need at least one pcpu".into());
        }
        if let Some(p) = self.back_allowed.iter().find(|p| **p >= self.pcpus) {
            return bad(format!("background pcpu {p} out of range"));
        }
        if !(self.penalty_decay > 0.0 && self.penalty_decay < 1.0) {
            return bad(format!(
                "penalty decay {} outside (0, 1)",
                self.penalty_decay
            ));
        }
        Ok(())
    }

    /// Grant of a task with base share `base` after `penalty` steps.
    pub fn penalized(&self, base: Duration, penalty: u32) -> Duration {
        base.mul_f64(self.penalty_decay.powi(penalty as i32))
    }
}

/// Work scheduled on a run queue.
pub trait Task: Send {
    fn name(&self) -> &str;
    /// Runs for up to `grant` starting at simulated time `now` and returns
    /// the time consumed. Returning less than the grant yields; returning
    /// more models work that could not be preempted.
    fn run(&mut self, grant: Duration, now: Duration) -> Duration;
    /// False when the task has nothing to do this cycle.
    fn runnable(&self) -> bool {
        true
    }
}

/// Always uses its whole grant.
#[derive(Debug, Clone)]
pub struct BusyTask(pub String);

impl Task for BusyTask {
    fn name(&self) -> &str {
        &self.0
    }
    fn run(&mut self, grant: Duration, _now: Duration) -> Duration {
        grant
    }
}

/// Runnable but yields immediately.
#[derive(Debug, Clone)]
pub struct YieldTask(pub String);

impl Task for YieldTask {
    fn name(&self) -> &str {
        &self.0
    }
    fn run(&mut self, _grant: Duration, _now: Duration) -> Duration {
        Duration::ZERO
    }
}

/// Runs a fixed time regardless of the grant.
#[derive(Debug, Clone)]
pub struct FixedTask {
    pub name: String,
    pub cost: Duration,
}

impl Task for FixedTask {
    fn name(&self) -> &str {
        &self.name
    }
    fn run(&mut self, _grant: Duration, _now: Duration) -> Duration {
        self.cost
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

struct Entry {
    id: TaskId,
    class: Class,
    dormant: bool,
    penalty: u32,
    task: Box<dyn Task>,
}

impl fmt::Debug for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Entry")
            .field("id", &self.id)
            .field("class", &self.class)
            .field("name", &self.task.name())
            .field("penalty", &self.penalty)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRow {
    pub task: TaskId,
    pub name: String,
    pub class: Class,
    pub granted: Duration,
    pub used: Duration,
    /// Penalty in force during the cycle.
    pub penalty: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleReport {
    pub pcpu: usize,
    pub cycle: u64,
    pub start: Duration,
    pub rows: Vec<TaskRow>,
    /// Time consumed per class; the idle entry includes unused time.
    pub class_used: [Duration; 4],
}

impl CycleReport {
    pub fn used(&self, c: Class) -> Duration {
        self.class_used[c.index()]
    }

    pub fn busy_time(&self) -> Duration {
        self.class_used[..3].iter().sum()
    }
}

#[derive(Debug)]
struct RunQueue {
    pcpu: usize,
    tasks: Vec<Entry>,
    cycle: u64,
    clock: Duration,
    cfg: Arc<SchedConfig>,
    cfg_generation: u64,
}

#[derive(Default)]
struct CycleState {
    granted: Vec<Duration>,
    used: Vec<Duration>,
    longest: Vec<Duration>,
    /// Used its whole last grant and is not penalized.
    hungry: Vec<bool>,
}

impl RunQueue {
    fn runnable(&self, class: Class) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| {
                let t = &self.tasks[i];
                t.class == class && !t.dormant && t.task.runnable()
            })
            .collect()
    }

    fn run_one(
        &mut self,
        st: &mut CycleState,
        i: usize,
        grant: Duration,
        now: &mut Duration,
    ) -> Duration {
        if grant.is_zero() {
            return Duration::ZERO;
        }
        let used = self.tasks[i].task.run(grant, *now);
        *now += used;
        st.granted[i] += grant;
        st.used[i] += used;
        st.longest[i] = st.longest[i].max(used);
        st.hungry[i] = self.tasks[i].penalty == 0 && used >= grant;
        used
    }

    fn cycle(&mut self) -> CycleReport {
        let cfg = self.cfg.clone();
        let n = self.tasks.len();
        let mut st = CycleState {
            granted: vec![Duration::ZERO; n],
            used: vec![Duration::ZERO; n],
            longest: vec![Duration::ZERO; n],
            hungry: vec![false; n],
        };
        let start = self.clock;
        let mut now = start;
        let mut class_used = [Duration::ZERO; 4];
        let mut carry = Duration::ZERO;

        for class in [Class::Vcpu, Class::Fcpu, Class::Back] {
            let avail = cfg.budget(class) + carry;
            let idx = self.runnable(class);
            if idx.is_empty() {
                carry = avail;
                continue;
            }
            let share = avail / idx.len() as u32;
            let mut used = Duration::ZERO;
            for &i in &idx {
                let grant = cfg.penalized(share, self.tasks[i].penalty);
                used += self.run_one(&mut st, i, grant, &mut now);
            }
            // Leftover inside the class goes to tasks that still want time.
            let left = avail.saturating_sub(used);
            let hungry: Vec<usize> = idx.iter().copied().filter(|&i| st.hungry[i]).collect();
            if !left.is_zero() && !hungry.is_empty() {
                let per = left / hungry.len() as u32;
                for i in hungry {
                    used += self.run_one(&mut st, i, per, &mut now);
                }
            }
            class_used[class.index()] = used;
            carry = avail.saturating_sub(used);
        }

        let mut surplus = carry + cfg.budget(Class::Idle);
        let demand: Vec<(Class, Vec<usize>)> = [Class::Vcpu, Class::Fcpu, Class::Back]
            .into_iter()
            .map(|c| {
                (
                    c,
                    self.runnable(c)
                        .into_iter()
                        .filter(|&i| st.hungry[i])
                        .collect::<Vec<_>>(),
                )
            })
            .filter(|(_, v)| !v.is_empty())
            .collect();
        if !surplus.is_zero() && !demand.is_empty() {
            let weight_sum: f64 = demand.iter().map(|(c, _)| cfg.ratio(*c)).sum();
            let total = surplus;
            for (c, idx) in &demand {
                let w = if weight_sum > 0.0 {
                    cfg.ratio(*c) / weight_sum
                } else {
                    1.0 / demand.len() as f64
                };
                let extra = total.mul_f64(w).min(surplus);
                let per = extra / idx.len() as u32;
                for &i in idx {
                    let used = self.run_one(&mut st, i, per, &mut now);
                    class_used[c.index()] += used;
                    surplus = surplus.saturating_sub(used);
                }
            }
        }

        let idle_tasks = self.runnable(Class::Idle);
        if !idle_tasks.is_empty() && !surplus.is_zero() {
            let per = surplus / idle_tasks.len() as u32;
            for i in idle_tasks {
                self.run_one(&mut st, i, per, &mut now);
            }
        }
        class_used[Class::Idle.index()] = surplus;

        let mut rows = Vec::new();
        for i in 0..n {
            let t = &self.tasks[i];
            if !st.granted[i].is_zero() || !st.used[i].is_zero() {
                rows.push(TaskRow {
                    task: t.id,
                    name: t.task.name().to_string(),
                    class: t.class,
                    granted: st.granted[i],
                    used: st.used[i],
                    penalty: t.penalty,
                });
            }
        }
        for i in 0..n {
            let longest = st.longest[i];
            account(&cfg, &mut self.tasks[i], longest);
        }
        self.cycle += 1;
        self.clock = start + cfg.cycle_period.max(now - start);
        CycleReport {
            pcpu: self.pcpu,
            cycle: self.cycle - 1,
            start,
            rows,
            class_used,
        }
    }
}

/// Penalty update after one cycle whose longest run took `elapsed`.
fn account(cfg: &SchedConfig, e: &mut Entry, elapsed: Duration) {
    if elapsed > cfg.max_duration[e.class.index()] {
        e.penalty = (e.penalty + 1).min(cfg.penalty_cap);
    } else {
        e.penalty = e.penalty.saturating_sub(1);
    }
}

#[derive(Debug)]
pub struct Scheduler {
    cfg: RwLock<(u64, Arc<SchedConfig>)>,
    rqs: Vec<Mutex<RunQueue>>,
    orphans: Mutex<VecDeque<Entry>>,
    next_id: AtomicU64,
}

impl Scheduler {
    pub fn new(cfg: SchedConfig) -> Result<Self, SchedError> {
        cfg.validate()?;
        let cfg = Arc::new(cfg);
        let rqs = (0..cfg.pcpus)
            .map(|p| {
                Mutex::new(RunQueue {
                    pcpu: p,
                    tasks: Vec::new(),
                    cycle: 0,
                    clock: Duration::ZERO,
                    cfg: cfg.clone(),
                    cfg_generation: 0,
                })
            })
            .collect();
        Ok(Self {
            cfg: RwLock::new((0, cfg)),
            rqs,
            orphans: Mutex::new(VecDeque::new()),
            next_id: AtomicU64::new(0),
        })
    }

    pub fn pcpus(&self) -> usize {
        self.rqs.len()
    }

    /// Most recently published config.
    pub fn config(&self) -> Arc<SchedConfig> {
        self.cfg.read().1.clone()
    }

    fn rq(&self, pcpu: usize) -> Result<&Mutex<RunQueue>, SchedError> {
        self.rqs.get(pcpu).ok_or(SchedError::NoSuchPcpu(pcpu))
    }

    /// Adds a task that runs from the next cycle of `pcpu`. FCPU tasks are
    /// held dormant until [`Scheduler::promote`].
    pub fn enqueue(
        &self,
        pcpu: usize,
        class: Class,
        task: Box<dyn Task>,
    ) -> Result<TaskId, SchedError> {
        let rq = self.rq(pcpu)?;
        if class == Class::Back && !self.config().back_allowed_on(pcpu) {
            return Err(SchedError::BackNotAllowed(pcpu));
        }
        let id = TaskId(self.next_id.fetch_add(1, Ordering::Relaxed));
        rq.lock().tasks.push(Entry {
            id,
            class,
            dormant: class == Class::Fcpu,
            penalty: 0,
            task,
        });
        Ok(id)
    }

    /// Turns a reserved FCPU task into a running VCPU task.
    pub fn promote(&self, id: TaskId) -> bool {
        for rq in &self.rqs {
            let mut rq = rq.lock();
            if let Some(e) = rq.tasks.iter_mut().find(|e| e.id == id && e.dormant) {
                e.dormant = false;
                e.class = Class::Vcpu;
                return true;
            }
        }
        false
    }

    /// Publishes a new config. Each run queue adopts it at its next cycle
    /// boundary. Invalid configs leave the current one in place.
    pub fn reconfigure(&self, cfg: SchedConfig) -> Result<(), SchedError> {
        cfg.validate()?;
        if cfg.pcpus != self.rqs.len() {
            return Err(SchedError::Config(format!(
                "pcpu count is fixed at {}, got {}",
                self.rqs.len(),
                cfg.pcpus
            )));
        }
        let mut g = self.cfg.write();
        g.0 += 1;
        g.1 = Arc::new(cfg);
        Ok(())
    }

    fn boundary(&self, rq: &mut RunQueue) {
        let (generation, cfg) = {
            let g = self.cfg.read();
            (g.0, g.1.clone())
        };
        if generation != rq.cfg_generation {
            rq.cfg = cfg.clone();
            rq.cfg_generation = generation;
            if !cfg.back_allowed_on(rq.pcpu) {
                let mut orphans = self.orphans.lock();
                let mut kept = Vec::with_capacity(rq.tasks.len());
                for e in rq.tasks.drain(..) {
                    if e.class == Class::Back {
                        orphans.push_back(e);
                    } else {
                        kept.push(e);
                    }
                }
                rq.tasks = kept;
            }
        }
        if cfg.back_allowed_on(rq.pcpu) {
            let mut orphans = self.orphans.lock();
            if !orphans.is_empty() {
                let take = orphans.len().div_ceil(cfg.back_allowed.len());
                for _ in 0..take {
                    if let Some(e) = orphans.pop_front() {
                        rq.tasks.push(e);
                    }
                }
            }
        }
    }

    /// Runs one cycle of `pcpu`, adopting any pending config first.
    pub fn run_cycle(&self, pcpu: usize) -> Result<CycleReport, SchedError> {
        let mut rq = self.rq(pcpu)?.lock();
        self.boundary(&mut rq);
        Ok(rq.cycle())
    }

    /// One cycle on every pcpu in order.
    pub fn run_round(&self) -> Vec<CycleReport> {
        (0..self.rqs.len())
            .map(|p| self.run_cycle(p).expect("pcpu in range"))
            .collect()
    }

    /// Applies the over-run rule to one task outside a cycle.
    pub fn account_overrun(&self, id: TaskId, elapsed: Duration) -> bool {
        for rq in &self.rqs {
            let mut rq = rq.lock();
            let cfg = rq.cfg.clone();
            if let Some(e) = rq.tasks.iter_mut().find(|e| e.id == id) {
                account(&cfg, e, elapsed);
                return true;
            }
        }
        false
    }

    pub fn penalty_of(&self, id: TaskId) -> Option<u32> {
        self.rqs.iter().find_map(|rq| {
            rq.lock()
                .tasks
                .iter()
                .find(|e| e.id == id)
                .map(|e| e.penalty)
        })
    }

    /// Pcpu currently holding task `id`.
    pub fn pcpu_of(&self, id: TaskId) -> Option<usize> {
        self.rqs
            .iter()
            .position(|rq| rq.lock().tasks.iter().any(|e| e.id == id))
    }

    pub fn tasks_on(&self, pcpu: usize, class: Class) -> usize {
        self.rqs[pcpu]
            .lock()
            .tasks
            .iter()
            .filter(|e| e.class == class)
            .count()
    }

    pub fn orphan_count(&self) -> usize {
        self.orphans.lock().len()
    }

    pub fn clock(&self, pcpu: usize) -> Duration {
        self.rqs[pcpu].lock().clock
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn us(n: u64) -> Duration {
        Duration::from_micros(n)
    }

    fn sched(ratios: [f64; 4]) -> Scheduler {
        let mut cfg = SchedConfig::new(1);
        cfg.ratios = ratios;
        Scheduler::new(cfg).unwrap()
    }

    #[test]
    fn busy_vcpu_and_back_keep_ratio() {
        let s = sched([0.8, 0.0, 0.15, 0.05]);
        s.enqueue(0, Class::Vcpu, Box::new(BusyTask("v".into())))
            .unwrap();
        s.enqueue(0, Class::Back, Box::new(BusyTask("b".into())))
            .unwrap();
        let r = s.run_cycle(0).unwrap();
        let v = r.used(Class::Vcpu).as_secs_f64();
        let b = r.used(Class::Back).as_secs_f64();
        assert!((v / b - 8.0 / 1.5).abs() < 1e-3, "{v} {b}");
        assert!(r.used(Class::Idle) < us(1));
        assert_eq!(s.clock(0), Duration::from_millis(1));
    }

    #[test]
    fn idle_vcpu_hands_time_to_back() {
        let s = sched([0.8, 0.0, 0.15, 0.05]);
        s.enqueue(0, Class::Vcpu, Box::new(YieldTask("v".into())))
            .unwrap();
        s.enqueue(0, Class::Back, Box::new(BusyTask("b".into())))
            .unwrap();
        let r = s.run_cycle(0).unwrap();
        assert!(r.used(Class::Back) >= us(999));
    }

    #[test]
    fn only_idle_burns_cycle() {
        let s = sched([0.8, 0.0, 0.15, 0.05]);
        s.enqueue(0, Class::Idle, Box::new(BusyTask("i".into())))
            .unwrap();
        let r = s.run_cycle(0).unwrap();
        assert_eq!(r.used(Class::Idle), Duration::from_millis(1));
        assert_eq!(r.busy_time(), Duration::ZERO);
    }

    #[test]
    fn overrun_penalty_decays() {
        let mut cfg = SchedConfig::new(1);
        cfg.max_duration[Class::Vcpu.index()] = us(500);
        let s = Scheduler::new(cfg).unwrap();
        let a = s
            .enqueue(0, Class::Vcpu, Box::new(BusyTask("a".into())))
            .unwrap();
        s.enqueue(0, Class::Vcpu, Box::new(BusyTask("b".into())))
            .unwrap();
        assert!(s.account_overrun(a, us(900)));
        assert!(s.account_overrun(a, us(900)));
        assert_eq!(s.penalty_of(a), Some(2));
        let mut grants = Vec::new();
        for _ in 0..3 {
            let r = s.run_cycle(0).unwrap();
            grants.push(r.rows.iter().find(|row| row.task == a).unwrap().granted);
        }
        assert!(grants[0] < grants[1] && grants[1] < grants[2], "{grants:?}");
        assert_eq!(s.penalty_of(a), Some(0));
    }

    #[test]
    fn fcpu_dormant_until_promoted() {
        let s = sched([0.7, 0.1, 0.15, 0.05]);
        let f = s
            .enqueue(0, Class::Fcpu, Box::new(BusyTask("f".into())))
            .unwrap();
        s.enqueue(0, Class::Back, Box::new(BusyTask("b".into())))
            .unwrap();
        let r = s.run_cycle(0).unwrap();
        assert!(r.rows.iter().all(|row| row.task != f));
        assert!(s.promote(f));
        let r = s.run_cycle(0).unwrap();
        assert!(r
            .rows
            .iter()
            .any(|row| row.task == f && row.class == Class::Vcpu));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SchedConfig::new(2);
        cfg.ratios = [0.7, 0.0, 0.15, 0.05];
        assert!(cfg.validate().is_err());
        let s = Scheduler::new(SchedConfig::new(2)).unwrap();
        assert!(s.reconfigure(cfg).is_err());
        assert_eq!(s.config().ratios, [0.8, 0.0, 0.15, 0.05]);
        let mut cfg = SchedConfig::new(2);
        cfg.back_allowed = vec![2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn back_rejected_on_disallowed_pcpu() {
        let mut cfg = SchedConfig::new(2);
        cfg.back_allowed = vec![1];
        let s = Scheduler::new(cfg).unwrap();
        assert_eq!(
            s.enqueue(0, Class::Back, Box::new(BusyTask("b".into())))
                .unwrap_err(),
            SchedError::BackNotAllowed(0)
        );
        s.enqueue(1, Class::Back, Box::new(BusyTask("b".into())))
            .unwrap();
        assert!(matches!(
            s.enqueue(5, Class::Vcpu, Box::new(BusyTask("v".into()))),
            Err(SchedError::NoSuchPcpu(5))
        ));
    }

    #[test]
    fn reconfigure_takes_effect_next_cycle_and_migrates() {
        let s = Scheduler::new(SchedConfig::new(2)).unwrap();
        let b = s
            .enqueue(0, Class::Back, Box::new(BusyTask("b".into())))
            .unwrap();
        s.enqueue(0, Class::Vcpu, Box::new(BusyTask("v".into())))
            .unwrap();
        s.run_round();
        let mut cfg = SchedConfig::new(2);
        cfg.back_allowed = vec![1];
        cfg.ratios = [0.9, 0.0, 0.05, 0.05];
        s.reconfigure(cfg).unwrap();
        let reports = s.run_round();
        assert!(reports[0].rows.iter().all(|r| r.task != b));
        assert_eq!(s.pcpu_of(b), Some(1));
        let r = s.run_cycle(1).unwrap();
        assert_eq!(r.used(Class::Back), Duration::from_millis(1));
        let r = s.run_cycle(0).unwrap();
        assert_eq!(r.used(Class::Vcpu), Duration::from_millis(1));
    }
}
