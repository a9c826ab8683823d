//! Deterministic discrete-event CPU simulator.
//!
//! Time is integer microseconds. The simulator advances in slices that end
//! at the next quantum boundary or the next job arrival, whichever comes
//! first. Inside a slice every job runs at a constant rate.
//!
//! CFS mode hands out `N * L` CPU microseconds per slice of length `L` by
//! water-filling over modules with runnable jobs: weights are the current
//! shares, a module never gets more than one core per runnable job, and what
//! a capped module cannot use flows to the others. Integer rounding uses
//! floor plus largest remainder, ties going to the module listed first.
//! Inside a module the allotment is split evenly over its jobs, the earliest
//! arrivals taking the odd microseconds.
//!
//! RT mode gives each module a budget of `N * t_c` microseconds per period
//! `P`, refilled at every period boundary. Modules are visited round-robin
//! starting from a pointer that advances every slice; each visited module
//! puts its jobs on free cores in arrival order while budget lasts.
//!
//! A job allotted `c` microseconds in a slice of length `L` runs at rate
//! `c / L`; if it needs `r <= c` it completes `ceil(r * L / c)` into the
//! slice. CPU time it leaves unused is not handed to anyone else.
//!
//! Assignments take effect at the next quantum boundary (CFS) or the next
//! period boundary (RT), counted from the time they were produced.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::controller::{Allocations, ModuleId, ScheduleAssignment, SchedulerMode, SchedulerSection, MAX_PERIOD_US};
use crate::reactive::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimMachine {
    pub processors: u32,
    pub quantum_us: Micros,
    pub mode: SchedulerMode,
    pub period_us: Micros,
    /// CFS only: never exceed a module's share even when cores sit idle.
    pub strict_cap: bool,
}

impl SimMachine {
    pub fn cfs(processors: u32) -> Self {
        SimMachine {
            processors,
            quantum_us: 1_000,
            mode: SchedulerMode::Cfs,
            period_us: MAX_PERIOD_US,
            strict_cap: false,
        }
    }

    pub fn rt(processors: u32, period_us: Micros) -> Self {
        SimMachine {
            mode: SchedulerMode::Rt,
            period_us,
            ..Self::cfs(processors)
        }
    }

    pub fn with_quantum(mut self, quantum_us: Micros) -> Self {
        self.quantum_us = quantum_us;
        self
    }

    pub fn from_config(s: &SchedulerSection) -> Self {
        SimMachine {
            processors: s.processors,
            quantum_us: s.quantum_us,
            mode: s.mode,
            period_us: s.period_us,
            strict_cap: s.strict_cap,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidMachine(m));
        if self.processors == 0 {
            return bad("at least one processor is required".into());
        }
        if self.quantum_us == 0 {
            return bad("quantum must be positive".into());
        }
        if self.period_us == 0 || self.period_us > MAX_PERIOD_US {
            return bad(format!("period {} us is outside (0, {MAX_PERIOD_US}]", self.period_us));
        }
        if self.period_us % self.quantum_us != 0 {
            return bad(format!("quantum {} us does not divide period {} us", self.quantum_us, self.period_us));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimJob {
    pub module: ModuleId,
    pub arrival_us: Micros,
    /// CPU microseconds the job needs on one core.
    pub work_us: Micros,
    pub completion_us: Option<Micros>,
}

impl SimJob {
    pub fn new(module: impl Into<ModuleId>, arrival_us: Micros, work_us: Micros) -> Self {
        SimJob {
            module: module.into(),
            arrival_us,
            work_us,
            completion_us: None,
        }
    }
}

/// Consecutive slices in which one module held the same allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Span {
    pub start_us: Micros,
    pub end_us: Micros,
    pub module: ModuleId,
    /// Share in cores (CFS) or slice in microseconds (RT).
    pub allocation: f64,
    pub cpu_us: Micros,
}

/// An allocation as it took effect inside the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ShareRecord {
    pub time_us: Micros,
    pub module: ModuleId,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub machine: SimMachine,
    pub modules: Vec<ModuleId>,
    pub spans: Vec<Span>,
    pub shares: Vec<ShareRecord>,
    /// Every submitted job, in submission order.
    pub jobs: Vec<SimJob>,
}

impl SimTrace {
    /// Completion time of the last job, or 0 without jobs.
    pub fn makespan_us(&self) -> Micros {
        self.jobs.iter().filter_map(|j| j.completion_us).max().unwrap_or(0)
    }

    pub fn cpu_us(&self, module: &ModuleId) -> Micros {
        self.spans.iter().filter(|s| &s.module == module).map(|s| s.cpu_us).sum()
    }

    pub fn total_cpu_us(&self) -> Micros {
        self.spans.iter().map(|s| s.cpu_us).sum()
    }

    /// Allocation in effect for `module` at time `t`, per the share trace.
    pub fn allocation_at(&self, module: &ModuleId, t: Micros) -> Option<f64> {
        self.shares
            .iter()
            .rev()
            .find(|r| &r.module == module && r.time_us <= t)
            .map(|r| r.value)
    }

    /// Writes `time_us,module,share_or_slice,cpu_us`, one row per span.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_us", "module", "share_or_slice", "cpu_us"])?;
        for s in &self.spans {
            w.write_record([
                s.start_us.to_string(),
                s.module.to_string(),
                s.allocation.to_string(),
                s.cpu_us.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("job references unknown module `{0}`")]
    UnknownModule(ModuleId),
    #[error("invalid machine: {0}")]
    InvalidMachine(String),
    #[error("job for `{0}` has zero work")]
    ZeroWork(ModuleId),
    #[error("job arrives at {arrival} us, before the simulator clock {clock} us")]
    ArrivalInPast { arrival: Micros, clock: Micros },
    #[error("{runnable} runnable jobs can never progress after {at} us")]
    Stalled { at: Micros, runnable: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone)]
struct Job {
    module: usize,
    arrival: Micros,
    work: Micros,
    remaining: Micros,
    completion: Option<Micros>,
}

#[derive(Debug, Clone, PartialEq)]
enum Policy {
    /// Shares in cores and the same in parts per million.
    Cfs(Vec<f64>, Vec<u64>),
    Rt(Vec<u64>),
}

impl Policy {
    fn value(&self, m: usize) -> f64 {
        match self {
            Policy::Cfs(s, _) => s[m],
            Policy::Rt(t) => t[m] as f64,
        }
    }
}

pub struct Simulator {
    machine: SimMachine,
    modules: Vec<ModuleId>,
    index: HashMap<ModuleId, usize>,
    clock: Micros,
    jobs: Vec<Job>,
    queues: Vec<VecDeque<usize>>,
    future: BTreeSet<(Micros, usize)>,
    policy: Policy,
    scheduled: BTreeMap<(Micros, u64), Policy>,
    last_epoch: Option<u64>,
    budgets: Vec<u64>,
    period: u64,
    rr: usize,
    spans: Vec<Span>,
    open: Vec<Option<usize>>,
    shares: Vec<ShareRecord>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("machine", &self.machine)
            .field("clock", &self.clock)
            .field("jobs", &self.jobs.len())
            .finish_non_exhaustive()
    }
}

fn ceil_to(t: Micros, grid: Micros) -> Micros {
    t.div_ceil(grid) * grid
}

impl Simulator {
    /// A simulator whose allocation is an equal split until the first
    /// assignment takes effect.
    pub fn new(machine: SimMachine, modules: &[ModuleId]) -> Result<Self, SimError> {
        machine.validate()?;
        if modules.is_empty() {
            return Err(SimError::InvalidMachine("no modules".into()));
        }
        let n = modules.len();
        let policy = match machine.mode {
            SchedulerMode::Cfs => {
                let s = f64::from(machine.processors) / n as f64;
                Policy::Cfs(vec![s; n], vec![(s * 1e6).round() as u64; n])
            }
            SchedulerMode::Rt => Policy::Rt(vec![machine.period_us / n as u64; n]),
        };
        let mut sim = Simulator {
            machine,
            modules: modules.to_vec(),
            index: modules.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect(),
            clock: 0,
            jobs: Vec::new(),
            queues: vec![VecDeque::new(); n],
            future: BTreeSet::new(),
            policy,
            scheduled: BTreeMap::new(),
            last_epoch: None,
            budgets: vec![0; n],
            period: 0,
            rr: 0,
            spans: Vec::new(),
            open: vec![None; n],
            shares: Vec::new(),
        };
        sim.refill();
        Ok(sim)
    }

    pub fn machine(&self) -> &SimMachine {
        &self.machine
    }

    pub fn clock(&self) -> Micros {
        self.clock
    }

    pub fn modules(&self) -> &[ModuleId] {
        &self.modules
    }

    /// Jobs submitted and not completed yet, arrived or not.
    pub fn outstanding(&self) -> usize {
        self.jobs.iter().filter(|j| j.completion.is_none()).count()
    }

    pub fn submit(&mut self, job: SimJob) -> Result<usize, SimError> {
        let module = *self.index.get(&job.module).ok_or_else(|| SimError::UnknownModule(job.module.clone()))?;
        if job.work_us == 0 {
            return Err(SimError::ZeroWork(job.module));
        }
        if job.arrival_us < self.clock {
            return Err(SimError::ArrivalInPast {
                arrival: job.arrival_us,
                clock: self.clock,
            });
        }
        let id = self.jobs.len();
        self.jobs.push(Job {
            module,
            arrival: job.arrival_us,
            work: job.work_us,
            remaining: job.work_us,
            completion: None,
        });
        self.future.insert((job.arrival_us, id));
        Ok(id)
    }

    /// Queues `assignment`, produced at time `at`, for its effective time.
    pub fn apply_assignment(&mut self, at: Micros, assignment: &ScheduleAssignment) -> Result<(), BackendError> {
        if assignment.mode() != self.machine.mode {
            return Err(BackendError::ModeMismatch {
                expected: self.machine.mode,
                got: assignment.mode(),
            });
        }
        if let Some(last) = self.last_epoch {
            if assignment.epoch <= last {
                return Err(BackendError::StaleEpoch {
                    last,
                    got: assignment.epoch,
                });
            }
        }
        if at < self.clock {
            return Err(BackendError::InThePast { at, clock: self.clock });
        }
        if let Some((m, _)) = assignment.values().find(|(m, _)| !self.index.contains_key(*m)) {
            return Err(BackendError::UnknownModule(m.clone()));
        }
        let n = self.modules.len();
        let (policy, grid) = match &assignment.allocations {
            Allocations::Cfs { shares } => {
                let s: Vec<f64> = self.modules.iter().map(|m| shares.get(m).copied().unwrap_or(0.0)).collect();
                let ppm = s.iter().map(|v| (v * 1e6).round() as u64).collect();
                (Policy::Cfs(s, ppm), self.machine.quantum_us)
            }
            Allocations::Rt { period_us, slices } => {
                if *period_us != self.machine.period_us {
                    return Err(BackendError::PeriodMismatch {
                        period_us: *period_us,
                        quantum_us: self.machine.quantum_us,
                    });
                }
                let t = self.modules.iter().map(|m| slices.get(m).copied().unwrap_or(0)).collect::<Vec<_>>();
                debug_assert_eq!(t.len(), n);
                (Policy::Rt(t), self.machine.period_us)
            }
        };
        self.last_epoch = Some(assignment.epoch);
        self.scheduled.insert((ceil_to(at, grid), assignment.epoch), policy);
        Ok(())
    }

    fn refill(&mut self) {
        if let Policy::Rt(t) = &self.policy {
            let n = u64::from(self.machine.processors);
            self.budgets = t.iter().map(|&v| v * n).collect();
        }
    }

    fn install(&mut self, at: Micros, policy: Policy) {
        self.shares.retain(|r| r.time_us != at);
        for (i, m) in self.modules.iter().enumerate() {
            self.shares.push(ShareRecord {
                time_us: at,
                module: m.clone(),
                value: policy.value(i),
            });
        }
        self.policy = policy;
        // RT assignments start on a period boundary before anything ran in
        // that period, so the fresh budget is the whole slice.
        self.refill();
    }

    fn settle(&mut self) {
        while let Some(entry) = self.scheduled.first_entry() {
            if entry.key().0 > self.clock {
                break;
            }
            let ((at, _), policy) = entry.remove_entry();
            self.install(at, policy);
        }
        while let Some(&(arrival, id)) = self.future.first() {
            if arrival > self.clock {
                break;
            }
            self.future.pop_first();
            self.queues[self.jobs[id].module].push_back(id);
        }
        let period = self.clock / self.machine.period_us;
        if period != self.period {
            self.period = period;
            self.refill();
        }
    }

    fn runnable(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    fn next_arrival(&self) -> Option<Micros> {
        self.future.first().map(|&(t, _)| t)
    }

    fn next_change(&self) -> Option<Micros> {
        let eff = self.scheduled.keys().next().map(|&(t, _)| t);
        [self.next_arrival(), eff].into_iter().flatten().min()
    }

    /// Runs every slice that ends at or before `limit`.
    pub fn run_until(&mut self, limit: Micros) -> Result<(), SimError> {
        loop {
            self.settle();
            if self.runnable() == 0 {
                match self.next_change() {
                    Some(t) if t <= limit => {
                        self.clock = t;
                        continue;
                    }
                    _ => return Ok(()),
                }
            }
            let boundary = (self.clock / self.machine.quantum_us + 1) * self.machine.quantum_us;
            let end = self.next_arrival().map_or(boundary, |a| a.min(boundary));
            if end > limit {
                return Ok(());
            }
            let len = end - self.clock;
            let allocs = match self.machine.mode {
                SchedulerMode::Cfs => self.cfs_allocs(len),
                SchedulerMode::Rt => self.rt_allocs(len),
            };
            if allocs.iter().all(|&(_, c)| c == 0) {
                // Nothing can run until an arrival, an assignment or a
                // budget refill changes the picture.
                let refill = match &self.policy {
                    Policy::Rt(t) if (0..t.len()).any(|m| t[m] > 0 && !self.queues[m].is_empty()) => {
                        Some((self.period + 1) * self.machine.period_us)
                    }
                    _ => None,
                };
                let wake = [self.next_change(), refill].into_iter().flatten().min();
                match wake {
                    Some(t) if t <= limit => {
                        self.clock = t;
                        continue;
                    }
                    // `finish` reports a stall if nothing else arrives.
                    _ => return Ok(()),
                }
            }
            self.step(len, &allocs);
        }
    }

    fn step(&mut self, len: Micros, allocs: &[(usize, Micros)]) {
        let start = self.clock;
        let mut per_module = vec![0u64; self.modules.len()];
        for &(id, c) in allocs {
            if c == 0 {
                continue;
            }
            let job = &mut self.jobs[id];
            if job.remaining <= c {
                let took = (u128::from(job.remaining) * u128::from(len)).div_ceil(u128::from(c)) as u64;
                job.completion = Some(start + took);
                per_module[job.module] += job.remaining;
                job.remaining = 0;
            } else {
                job.remaining -= c;
                per_module[job.module] += c;
            }
        }
        // RT spans never straddle a period so budgets can be read off them.
        let grid = match self.machine.mode {
            SchedulerMode::Rt => self.machine.period_us,
            SchedulerMode::Cfs => Micros::MAX,
        };
        for (m, queue) in self.queues.iter_mut().enumerate() {
            if queue.is_empty() {
                continue;
            }
            let used = per_module[m];
            let allocation = self.policy.value(m);
            match self.open[m] {
                Some(i)
                    if self.spans[i].end_us == start
                        && self.spans[i].allocation == allocation
                        && self.spans[i].start_us / grid == start / grid =>
                {
                    self.spans[i].end_us = start + len;
                    self.spans[i].cpu_us += used;
                }
                _ => {
                    self.open[m] = Some(self.spans.len());
                    self.spans.push(Span {
                        start_us: start,
                        end_us: start + len,
                        module: self.modules[m].clone(),
                        allocation,
                        cpu_us: used,
                    });
                }
            }
            let jobs = &self.jobs;
            queue.retain(|&id| jobs[id].completion.is_none());
        }
        if self.machine.mode == SchedulerMode::Rt {
            for (b, used) in self.budgets.iter_mut().zip(&per_module) {
                *b = b.saturating_sub(*used);
            }
            self.rr = (self.rr + 1) % self.modules.len();
        }
        self.clock = start + len;
    }

    fn cfs_allocs(&self, len: Micros) -> Vec<(usize, Micros)> {
        let Policy::Cfs(_, ppm) = &self.policy else {
            unreachable!("CFS machine with RT policy")
        };
        let len128 = u128::from(len);
        let active: Vec<usize> = (0..self.modules.len()).filter(|&m| !self.queues[m].is_empty()).collect();
        let cap = |m: usize| self.queues[m].len() as u128 * len128;
        let mut module_alloc = vec![0u128; self.modules.len()];

        if self.machine.strict_cap {
            for &m in &active {
                module_alloc[m] = cap(m).min(u128::from(ppm[m]) * len128 / 1_000_000);
            }
        } else {
            let mut capacity = u128::from(self.machine.processors) * len128;
            let mut open = active.clone();
            loop {
                let sum: u128 = open.iter().map(|&m| u128::from(ppm[m])).sum();
                let w = |m: usize| if sum == 0 { 1 } else { u128::from(ppm[m]) };
                let total = if sum == 0 { open.len() as u128 } else { sum };
                let (capped, rest): (Vec<usize>, Vec<usize>) =
                    open.iter().partition(|&&m| cap(m) * total <= capacity * w(m));
                if capped.is_empty() {
                    let share: Vec<(usize, u128, u128)> =
                        open.iter().map(|&m| (m, capacity * w(m) / total, capacity * w(m) % total)).collect();
                    let given: u128 = share.iter().map(|s| s.1).sum();
                    let mut order: Vec<usize> = (0..share.len()).collect();
                    order.sort_by(|&a, &b| share[b].2.cmp(&share[a].2).then(share[a].0.cmp(&share[b].0)));
                    for &(m, base, _) in &share {
                        module_alloc[m] = base;
                    }
                    for &i in order.iter().take((capacity - given) as usize) {
                        module_alloc[share[i].0] += 1;
                    }
                    break;
                }
                for &m in &capped {
                    module_alloc[m] = cap(m);
                    capacity -= cap(m);
                }
                open = rest;
                if open.is_empty() {
                    break;
                }
            }
        }

        let mut out = Vec::new();
        for &m in &active {
            let k = self.queues[m].len() as u128;
            let (base, extra) = (module_alloc[m] / k, module_alloc[m] % k);
            for (i, &id) in self.queues[m].iter().enumerate() {
                out.push((id, (base + u128::from((i as u128) < extra)) as u64));
            }
        }
        out
    }

    fn rt_allocs(&self, len: Micros) -> Vec<(usize, Micros)> {
        let n = self.modules.len();
        let mut budget = self.budgets.clone();
        let mut cores = self.machine.processors;
        let mut out = Vec::new();
        for i in 0..n {
            let m = (self.rr + i) % n;
            for &id in &self.queues[m] {
                if cores == 0 || budget[m] == 0 {
                    break;
                }
                let c = len.min(budget[m]);
                budget[m] -= c;
                cores -= 1;
                out.push((id, c));
            }
        }
        out
    }

    /// Runs until every submitted job completes and returns the trace.
    pub fn finish(mut self) -> Result<SimTrace, SimError> {
        self.run_until(Micros::MAX)?;
        let at = self.clock;
        if self.runnable() > 0 || !self.future.is_empty() {
            return Err(SimError::Stalled {
                at,
                runnable: self.runnable() + self.future.len(),
            });
        }
        while let Some(((at, _), policy)) = self.scheduled.pop_first() {
            self.install(at, policy);
        }
        let jobs = self
            .jobs
            .iter()
            .map(|j| SimJob {
                module: self.modules[j.module].clone(),
                arrival_us: j.arrival,
                work_us: j.work,
                completion_us: j.completion,
            })
            .collect();
        Ok(SimTrace {
            machine: self.machine,
            modules: self.modules,
            spans: self.spans,
            shares: self.shares,
            jobs,
        })
    }
}

impl Backend for Simulator {
    fn apply(&mut self, at: Micros, assignment: &ScheduleAssignment) -> Result<(), BackendError> {
        self.apply_assignment(at, assignment)
    }
}

fn modules_of(jobs: &[SimJob]) -> Vec<ModuleId> {
    let set: BTreeSet<&ModuleId> = jobs.iter().map(|j| &j.module).collect();
    set.into_iter().cloned().collect()
}

/// Simulates `jobs` under an epoch-stamped assignment schedule. The module
/// set is the first assignment's, or the jobs' when the schedule is empty.
pub fn sim_run(jobs: &[SimJob], schedule: &[(Micros, ScheduleAssignment)], machine: SimMachine) -> Result<SimTrace, SimError> {
    let modules: Vec<ModuleId> = match schedule.first() {
        Some((_, a)) => a.values().map(|(m, _)| m.clone()).collect(),
        None => modules_of(jobs),
    };
    if modules.is_empty() {
        machine.validate()?;
        return Ok(SimTrace {
            machine,
            modules,
            spans: vec![],
            shares: vec![],
            jobs: vec![],
        });
    }
    let mut sim = Simulator::new(machine, &modules)?;
    for (at, a) in schedule {
        sim.apply_assignment(*at, a)?;
    }
    for j in jobs {
        sim.submit(j.clone())?;
    }
    sim.finish()
}

/// Equal CFS shares for every module at all times, without a controller.
pub fn baseline_run(jobs: &[SimJob], machine: SimMachine) -> Result<SimTrace, SimError> {
    let machine = SimMachine {
        mode: SchedulerMode::Cfs,
        strict_cap: false,
        ..machine
    };
    let modules = modules_of(jobs);
    let schedule = if modules.is_empty() {
        vec![]
    } else {
        let a = ScheduleAssignment::equal(&modules, SchedulerMode::Cfs, machine.processors, machine.period_us)
            .map_err(|e| SimError::InvalidMachine(e.to_string()))?;
        vec![(0, a)]
    };
    sim_run(jobs, &schedule, machine)
}
