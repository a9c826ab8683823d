mod common;

use common::{reference_run, RefOutcome};
use ctxsched_core::sim::SimError;
use ctxsched_core::{compute_cfs_shares, compute_rt_slices, sim_run, ModuleId, SchedulerMode, ScoreSet, SimJob, SimMachine};
use proptest::prelude::*;

const Q: u64 = 500;

fn modules() -> Vec<ModuleId> {
    ["x", "y", "z"].into_iter().map(ModuleId::new).collect()
}

fn job() -> impl Strategy<Value = SimJob> {
    (0usize..3, 0u64..12, 1u64..15_000).prop_map(|(m, slot, work)| SimJob::new(modules()[m].clone(), slot * Q, work))
}

fn change() -> impl Strategy<Value = (u64, [u8; 3])> {
    (0u64..20_000, prop::array::uniform3(0u8..6))
}

fn machine() -> impl Strategy<Value = SimMachine> {
    (1u32..4, any::<bool>(), any::<bool>(), 1u64..6).prop_map(|(n, rt, strict, periods)| {
        let base = if rt {
            SimMachine::rt(n, periods * 2 * Q)
        } else {
            SimMachine {
                strict_cap: strict,
                ..SimMachine::cfs(n)
            }
        };
        base.with_quantum(Q)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn random_workloads_match_the_reference(
        jobs in prop::collection::vec(job(), 1..6),
        mut changes in prop::collection::vec(change(), 0..4),
        machine in machine(),
    ) {
        changes.sort_by_key(|c| c.0);
        let mut schedule = Vec::new();
        for (epoch, (at, w)) in std::iter::once((0, [1, 1, 1])).chain(changes).enumerate() {
            let scores: ScoreSet = modules().into_iter().zip(w.map(f64::from)).collect();
            let mut a = match machine.mode {
                SchedulerMode::Cfs => compute_cfs_shares(&scores, machine.processors).unwrap(),
                SchedulerMode::Rt => compute_rt_slices(&scores, machine.period_us).unwrap(),
            };
            a.epoch = epoch as u64;
            schedule.push((at, a));
        }
        let expect = reference_run(&jobs, &schedule, machine);
        let got = match sim_run(&jobs, &schedule, machine) {
            Ok(trace) => {
                let cpu: u64 = trace.total_cpu_us();
                prop_assert_eq!(cpu, jobs.iter().map(|j| j.work_us).sum::<u64>());
                RefOutcome::Completed(trace.jobs.iter().map(|j| j.completion_us.unwrap()).collect())
            }
            Err(SimError::Stalled { .. }) => RefOutcome::Stalled,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(got, expect);
    }
}
