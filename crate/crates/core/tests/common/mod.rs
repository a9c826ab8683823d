//! Reference implementations used as oracles by the integration tests.
//!
//! Nothing here calls into the code it checks except for data types and
//! file loading.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use ctxsched_core::{Allocations, ModuleId, ScheduleAssignment, SchedulerMode, SimJob, SimMachine, Timeline};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn robot_config() -> ctxsched_core::ControllerConfig {
    ctxsched_core::load_config(data_dir().join("robot.toml")).expect("reference config loads")
}

pub fn timeline(name: &str) -> Timeline {
    ctxsched_core::load_timeline(data_dir().join("timelines").join(format!("{name}.json"))).expect("timeline loads")
}

/// `N * w / sum(w)` straight from the definition, or an even split when all
/// weights are zero.
pub fn direct_shares(weights: &[u32], processors: u32) -> Vec<f64> {
    let sum: u32 = weights.iter().sum();
    if sum == 0 {
        return vec![f64::from(processors) / weights.len() as f64; weights.len()];
    }
    weights
        .iter()
        .map(|&w| f64::from(processors) * f64::from(w) / f64::from(sum))
        .collect()
}

/// Outcome of a reference run: completion time per job in submission order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefOutcome {
    Completed(Vec<u64>),
    Stalled,
}

#[derive(Clone)]
enum RefPolicy {
    /// Weight per module in parts per million of a core.
    Cfs(Vec<u64>),
    /// Runtime per module per period.
    Rt(Vec<u64>),
}

fn policy_of(a: &ScheduleAssignment, modules: &[ModuleId]) -> RefPolicy {
    match &a.allocations {
        Allocations::Cfs { shares } => RefPolicy::Cfs(
            modules
                .iter()
                .map(|m| (shares.get(m).copied().unwrap_or(0.0) * 1e6).round() as u64)
                .collect(),
        ),
        Allocations::Rt { slices, .. } => RefPolicy::Rt(modules.iter().map(|m| slices.get(m).copied().unwrap_or(0)).collect()),
    }
}

/// Splits `capacity` over modules in proportion to `weight`, nobody getting
/// more than `cap`, rounding down and handing the leftover units out by
/// largest remainder (lowest index on ties).
fn water_fill(capacity: u128, weight: &[u128], cap: &[u128]) -> Vec<u128> {
    let n = weight.len();
    let mut out = vec![0u128; n];
    let mut left = capacity;
    let mut free: Vec<usize> = (0..n).collect();
    loop {
        let all_zero = free.iter().all(|&i| weight[i] == 0);
        let w = |i: usize| if all_zero { 1 } else { weight[i] };
        let total: u128 = free.iter().map(|&i| w(i)).sum();
        if free.is_empty() {
            return out;
        }
        // The module that saturates first relative to its weight.
        let tightest = free
            .iter()
            .copied()
            .filter(|&i| cap[i] * total <= left * w(i))
            .min_by(|&a, &b| (cap[a] * w(b)).cmp(&(cap[b] * w(a))));
        match tightest {
            Some(i) => {
                out[i] = cap[i];
                left -= cap[i];
                free.retain(|&j| j != i);
            }
            None => {
                let mut rem: Vec<(u128, usize)> = Vec::new();
                for &i in &free {
                    out[i] = left * w(i) / total;
                    rem.push((left * w(i) % total, i));
                }
                let given: u128 = free.iter().map(|&i| out[i]).sum();
                rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(_, i) in rem.iter().take((left - given) as usize) {
                    out[i] += 1;
                }
                return out;
            }
        }
    }
}

/// Quantum-by-quantum simulation. Requires every arrival on a quantum
/// boundary so that each step is exactly one quantum long.
pub fn reference_run(jobs: &[SimJob], schedule: &[(u64, ScheduleAssignment)], machine: SimMachine) -> RefOutcome {
    let q = machine.quantum_us;
    let p = machine.period_us;
    let modules: Vec<ModuleId> = schedule[0].1.values().map(|(m, _)| m.clone()).collect();
    let n = modules.len();
    let module_of: Vec<usize> = jobs.iter().map(|j| modules.iter().position(|m| *m == j.module).unwrap()).collect();
    assert!(jobs.iter().all(|j| j.arrival_us % q == 0), "arrivals must sit on quantum boundaries");

    let grid = match machine.mode {
        SchedulerMode::Cfs => q,
        SchedulerMode::Rt => p,
    };
    // Effective time -> policy; a later assignment for the same instant wins.
    let mut pending: BTreeMap<u64, RefPolicy> = BTreeMap::new();
    for (at, a) in schedule {
        pending.insert(at.div_ceil(grid) * grid, policy_of(a, &modules));
    }

    let mut policy = match machine.mode {
        SchedulerMode::Cfs => RefPolicy::Cfs(vec![(f64::from(machine.processors) / n as f64 * 1e6).round() as u64; n]),
        SchedulerMode::Rt => RefPolicy::Rt(vec![p / n as u64; n]),
    };
    let mut remaining: Vec<u64> = jobs.iter().map(|j| j.work_us).collect();
    let mut done: Vec<Option<u64>> = vec![None; jobs.len()];
    let mut budget = vec![0u64; n];
    let mut pointer = 0usize;
    let last_arrival = jobs.iter().map(|j| j.arrival_us).max().unwrap_or(0);
    // With nothing left to arrive or take effect, a CFS quantum or two RT
    // periods without progress mean none will ever come.
    let mut idle = 0u64;
    let patience = match machine.mode {
        SchedulerMode::Cfs => 1,
        SchedulerMode::Rt => 2 * p / q + 2,
    };

    let mut t = 0u64;
    while done.iter().any(Option::is_none) {
        if idle > patience {
            return RefOutcome::Stalled;
        }
        let mut refill = t % p == 0;
        while let Some((&eff, _)) = pending.first_key_value() {
            if eff > t {
                break;
            }
            policy = pending.pop_first().unwrap().1;
            refill = true;
        }
        if refill {
            if let RefPolicy::Rt(slices) = &policy {
                budget = slices.iter().map(|&s| s * u64::from(machine.processors)).collect();
            }
        }

        // Runnable jobs per module, earliest arrival (then submission) first.
        let mut queue: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut order: Vec<usize> = (0..jobs.len()).filter(|&j| done[j].is_none() && jobs[j].arrival_us <= t).collect();
        order.sort_by_key(|&j| (jobs[j].arrival_us, j));
        for j in order {
            queue[module_of[j]].push(j);
        }

        let mut grant = vec![0u64; jobs.len()];
        match &policy {
            RefPolicy::Cfs(ppm) => {
                let active: Vec<usize> = (0..n).filter(|&m| !queue[m].is_empty()).collect();
                let weight: Vec<u128> = active.iter().map(|&m| u128::from(ppm[m])).collect();
                let cap: Vec<u128> = active.iter().map(|&m| queue[m].len() as u128 * u128::from(q)).collect();
                let cpu = if machine.strict_cap {
                    active
                        .iter()
                        .map(|&m| (queue[m].len() as u128 * u128::from(q)).min(u128::from(ppm[m]) * u128::from(q) / 1_000_000))
                        .collect()
                } else {
                    water_fill(u128::from(machine.processors) * u128::from(q), &weight, &cap)
                };
                for (k, &m) in active.iter().enumerate() {
                    let jobs_here = queue[m].len() as u128;
                    for (i, &j) in queue[m].iter().enumerate() {
                        grant[j] = (cpu[k] / jobs_here + u128::from((i as u128) < cpu[k] % jobs_here)) as u64;
                    }
                }
            }
            RefPolicy::Rt(_) => {
                let mut cores = machine.processors;
                let mut left = budget.clone();
                for step in 0..n {
                    let m = (pointer + step) % n;
                    for &j in &queue[m] {
                        if cores == 0 || left[m] == 0 {
                            break;
                        }
                        grant[j] = q.min(left[m]);
                        left[m] -= grant[j];
                        cores -= 1;
                    }
                }
            }
        }

        let mut ran = false;
        for j in 0..jobs.len() {
            let c = grant[j];
            if c == 0 {
                continue;
            }
            ran = true;
            let used = remaining[j].min(c);
            if remaining[j] <= c {
                done[j] = Some(t + (remaining[j] * q).div_ceil(c));
            }
            remaining[j] -= used;
            budget[module_of[j]] = budget[module_of[j]].saturating_sub(used);
        }
        idle = if ran || !pending.is_empty() || t < last_arrival { 0 } else { idle + 1 };
        if ran && machine.mode == SchedulerMode::Rt {
            pointer = (pointer + 1) % n;
        }
        t += q;
    }
    RefOutcome::Completed(done.into_iter().map(Option::unwrap).collect())
}

/// Movement flag per imu entry as annotated in the timeline.
pub fn movement_samples(t: &Timeline) -> Vec<(u64, bool)> {
    t.entries
        .iter()
        .filter(|e| e.stream == "imu")
        .map(|e| {
            let moving = e.ground_truth.as_ref().and_then(|g| g.get("moving")).and_then(|v| v.as_bool());
            (e.t_ms * 1_000, moving.expect("imu entries carry ground truth"))
        })
        .collect()
}

/// Closed `[first, last]` microsecond ranges of consecutive moving samples.
pub fn movement_intervals(t: &Timeline) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut last = 0;
    for (at, moving) in movement_samples(t) {
        match (moving, start) {
            (true, None) => start = Some(at),
            (false, Some(s)) => {
                out.push((s, last));
                start = None;
            }
            _ => {}
        }
        last = at;
    }
    if let Some(s) = start {
        out.push((s, last));
    }
    out
}

/// Effective weight vectors of the reference robot computed by hand, one per
/// timeline entry (`None` until every score is known).
pub fn robot_weights(t: &Timeline) -> Vec<Option<[f64; 3]>> {
    let mut lost: Option<bool> = None;
    let mut signs: Option<f64> = None;
    let mut moving = false;
    t.entries
        .iter()
        .map(|e| {
            match e.stream.as_str() {
                "slam/status" => lost = e.payload["lost"].as_bool(),
                "sign_cam" => signs = e.payload["signs"].as_f64(),
                "imu" => {
                    let a = &e.payload["accelerometer"];
                    let norm = ["x", "y", "z"]
                        .iter()
                        .map(|k| a[*k].as_f64().unwrap().powi(2))
                        .sum::<f64>()
                        .sqrt();
                    moving = norm > 0.0;
                }
                _ => {}
            }
            let (lost, signs) = (lost?, signs?);
            let slam = 3.0 * if lost { 2.0 } else { 1.0 };
            let sign = 2.0 * (1.0 + signs.min(3.0));
            let speech = if moving { 0.0 } else { 12.0 };
            Some([slam, sign, speech])
        })
        .collect()
}
