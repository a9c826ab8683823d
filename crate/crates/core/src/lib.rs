//! Context-aware, event-driven CPU allocation for robot software modules.
//!
//! Sensor and module outputs arrive as [`reactive`] streams (optionally via
//! the [`pubsub`] bus). The [`controller`] turns per-module score
//! expressions into CPU shares or RT time slices whenever a relevant event
//! changes a score, and hands them to a [`backend::Backend`]: the
//! deterministic [`sim`]ulator or, with the `cgroup` feature, real cgroup
//! files. The [`harness`] replays JSON timelines through all of it.

pub mod backend;
pub mod cgroup;
pub mod controller;
pub mod expr;
pub mod harness;
pub mod pubsub;
pub mod reactive;
pub mod sim;
pub mod task;

pub use backend::{Backend, BackendError, RecordingBackend};
pub use controller::{
    apply_context_rules, compute_cfs_shares, compute_rt_slices, load_config, Allocations, Controller, ControllerConfig, ControllerError, ModuleId,
    RuleState, ScheduleAssignment, SchedulerMode, ScoreSet,
};
pub use expr::Expr;
pub use harness::{compare, emit_traces, load_timeline, replay, Comparison, MetricsReport, Replay, Timeline, TimelineEntry, Variant};
pub use reactive::{Dispatcher, Event, Micros, StreamId};
pub use sim::{baseline_run, sim_run, SimJob, SimMachine, SimTrace, Simulator};
pub use task::{ContextOverlay, TaskGraph};
