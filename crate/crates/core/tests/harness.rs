mod common;

use common::{movement_samples, robot_config, timeline};
use ctxsched_core::harness::{HarnessError, ReplayOptions};
use ctxsched_core::{compare, emit_traces, replay, ModuleId, Timeline, TimelineEntry, Variant};

#[test]
fn rt_sits_between_cfs_and_baseline_on_the_long_run() {
    let c = compare(&timeline("exp1"), &robot_config()).unwrap();
    let cfs = c.speedup(Variant::CfsCa).unwrap();
    let rt = c.speedup(Variant::RtCa).unwrap();
    assert_eq!(c.speedup(Variant::Baseline), Some(1.0));
    assert!(cfs >= rt && rt >= 1.0, "cfs_ca {cfs}, rt_ca {rt}");
}

#[test]
fn every_variant_sees_the_same_input() {
    let c = compare(&timeline("exp3"), &robot_config()).unwrap();
    let digests: Vec<&str> = c.replays.iter().map(|r| r.report.input_digest.as_str()).collect();
    assert_eq!(digests.len(), 3);
    assert!(digests.iter().all(|d| *d == digests[0] && d.len() == 64));
}

#[test]
fn speech_requests_during_movement_are_skipped() {
    let t = timeline("exp3");
    let samples = movement_samples(&t);
    let moving_at = |t_us: u64| samples.iter().rev().find(|s| s.0 <= t_us).is_some_and(|s| s.1);
    let expected = t
        .entries
        .iter()
        .filter(|e| e.stream == "mic" && moving_at(e.t_ms * 1_000))
        .count();
    assert!(expected > 0);

    let r = replay(&t, &robot_config(), Variant::CfsCa).unwrap().report;
    let speech = r.modules.iter().find(|m| m.module == ModuleId::new("speech")).unwrap();
    assert_eq!(speech.skipped, expected);
    assert_eq!(r.skipped_jobs, expected);

    let base = replay(&t, &robot_config(), Variant::Baseline).unwrap().report;
    assert_eq!(base.skipped_jobs, 0);
    assert_eq!(base.recompute_count, 0);
}

#[test]
fn work_is_conserved_in_every_variant() {
    let t = timeline("exp3");
    let c = compare(&t, &robot_config()).unwrap();
    for r in &c.replays {
        let submitted: u64 = r.trace.jobs.iter().map(|j| j.work_us).sum();
        assert_eq!(r.trace.total_cpu_us(), submitted, "{}", r.report.variant);
        assert!(r.trace.jobs.iter().all(|j| j.completion_us.unwrap() >= j.arrival_us + j.work_us));
    }
}

#[test]
fn traces_have_the_documented_columns() {
    let r = replay(&timeline("exp3"), &robot_config(), Variant::RtCa).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_traces(&r, dir.path()).unwrap();
    let header = |f: &str| {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        text.lines().next().unwrap().to_string()
    };
    assert_eq!(header("weights.csv"), "time_us,module,weight");
    assert_eq!(header("shares.csv"), "time_us,module,share");
    assert_eq!(header("jobs.csv"), "module,arrival_us,work_us,completion_us");
    assert_eq!(header("summary.csv"), "variant,module,total_ms,makespan_ms,speedup");
}

#[test]
fn replay_options_override_the_machine() {
    let t = timeline("exp3");
    let wide = ReplayOptions {
        processors: Some(16),
        ..ReplayOptions::default()
    };
    let r = ctxsched_core::harness::replay_with(&t, &robot_config(), Variant::Baseline, wide).unwrap().report;
    assert_eq!(r.processors, 16);
    let narrow = replay(&t, &robot_config(), Variant::Baseline).unwrap().report;
    assert!(r.makespan_ms < narrow.makespan_ms);
}

#[test]
fn unknown_streams_are_rejected_with_their_index() {
    let t = Timeline {
        name: "bad".into(),
        duration_ms: 10,
        entries: vec![TimelineEntry {
            t_ms: 0,
            stream: "lidar".into(),
            payload: serde_json::Value::Null,
            work_us: None,
            ground_truth: None,
        }],
    };
    match replay(&t, &robot_config(), Variant::CfsCa) {
        Err(HarnessError::UnknownStream { index, stream }) => assert_eq!((index, stream.as_str()), (0, "lidar")),
        other => panic!("unexpected {other:?}"),
    }
}
