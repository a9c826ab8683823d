//! Replays timelines against the controller and the simulator and turns the
//! result into metrics and CSV traces.
//!
//! Per timeline entry at time `t`: the simulator runs up to `t`, the entry
//! is fed to the controller (context-aware variants only), and if the entry's
//! stream triggers a module a job of `work_us` is submitted for it. In the
//! context-aware variants a job is only admitted when the module's task
//! graph, context overlays included, has a ready sub-task; otherwise it is
//! skipped.

mod timeline;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use timeline::{load_timeline, InputDigest, Timeline, TimelineEntry, TimelineError};

use crate::controller::{ConfigError, Controller, ControllerConfig, ControllerError, ModuleId, ScheduleAssignment, SchedulerMode};
use crate::reactive::Micros;
use crate::sim::{SimError, SimJob, SimMachine, SimTrace, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Equal CFS shares, no controller.
    Baseline,
    CfsCa,
    RtCa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::CfsCa, Variant::RtCa];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::CfsCa => "cfs_ca",
            Variant::RtCa => "rt_ca",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected baseline, cfs_ca or rt_ca)"))
    }
}

/// Command-line overrides of the config's scheduler section.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    pub processors: Option<u32>,
    pub quantum_us: Option<u64>,
    pub period_us: Option<u64>,
}

impl ReplayOptions {
    fn apply(&self, config: &mut ControllerConfig) {
        let s = &mut config.scheduler;
        s.processors = self.processors.unwrap_or(s.processors);
        s.quantum_us = self.quantum_us.unwrap_or(s.quantum_us);
        s.period_us = self.period_us.unwrap_or(s.period_us);
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error("entry {index}: stream `{stream}` is not an input of the config")]
    UnknownStream { index: usize, stream: String },
    #[error("entry {index}: no work_us for module `{module}` (set it on the entry or the module)")]
    NoWork { index: usize, module: ModuleId },
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("variants consumed different inputs ({0})")]
    DigestMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleMetrics {
    pub module: ModuleId,
    pub jobs: usize,
    /// Jobs refused at admission.
    pub skipped: usize,
    /// Sum of job turnaround times (completion minus arrival).
    pub total_ms: f64,
    /// Completion of the module's last job.
    pub makespan_ms: f64,
    pub cpu_ms: f64,
    /// Baseline `total_ms` over this variant's, once compared.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub time_us: Micros,
    pub module: ModuleId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub variant: Variant,
    pub timeline: String,
    pub processors: u32,
    pub modules: Vec<ModuleMetrics>,
    pub total_ms: f64,
    pub makespan_ms: f64,
    /// Baseline makespan over this variant's, once compared.
    pub speedup: Option<f64>,
    pub weights: Vec<WeightRow>,
    /// Assignments emitted after the initial policy.
    pub recompute_count: usize,
    pub assignments: Vec<(Micros, ScheduleAssignment)>,
    pub events: usize,
    pub skipped_jobs: usize,
    pub input_digest: String,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub report: MetricsReport,
    pub trace: SimTrace,
}

pub fn replay(timeline: &Timeline, config: &ControllerConfig, variant: Variant) -> Result<Replay, HarnessError> {
    replay_with(timeline, config, variant, ReplayOptions::default())
}

/// Records what reaches the simulator so the report can list it.
struct Tap<'a> {
    sim: &'a mut Simulator,
    log: &'a mut Vec<(Micros, ScheduleAssignment)>,
}

impl crate::backend::Backend for Tap<'_> {
    fn apply(&mut self, at: Micros, a: &ScheduleAssignment) -> Result<(), crate::backend::BackendError> {
        self.sim.apply_assignment(at, a)?;
        self.log.push((at, a.clone()));
        Ok(())
    }
}

pub fn replay_with(timeline: &Timeline, config: &ControllerConfig, variant: Variant, opts: ReplayOptions) -> Result<Replay, HarnessError> {
    let mut config = config.clone();
    opts.apply(&mut config);
    config.scheduler.mode = match variant {
        Variant::Baseline | Variant::CfsCa => SchedulerMode::Cfs,
        Variant::RtCa => SchedulerMode::Rt,
    };
    if variant == Variant::Baseline {
        config.scheduler.strict_cap = false;
    }
    config.validate()?;

    let modules: Vec<ModuleId> = config.modules.iter().map(|m| m.id.clone()).collect();
    let machine = SimMachine::from_config(&config.scheduler);
    let mut sim = Simulator::new(machine, &modules)?;
    let mut assignments = Vec::new();
    let mut weights = Vec::new();

    let mut controller = match variant {
        Variant::Baseline => {
            let s = &config.scheduler;
            let equal = ScheduleAssignment::equal(&modules, SchedulerMode::Cfs, s.processors, s.period_us)
                .map_err(ControllerError::from)?;
            sim.apply_assignment(0, &equal).map_err(SimError::from)?;
            assignments.push((0, equal));
            weights.extend(modules.iter().map(|m| WeightRow {
                time_us: 0,
                module: m.clone(),
                weight: 1.0,
            }));
            None
        }
        Variant::CfsCa | Variant::RtCa => {
            let mut c = Controller::new(config.clone())?;
            c.init(&mut Tap {
                sim: &mut sim,
                log: &mut assignments,
            })?;
            Some(c)
        }
    };

    let mut digest = InputDigest::default();
    let mut skipped = vec![0usize; modules.len()];
    for (index, entry) in timeline.entries.iter().enumerate() {
        if config.input(&entry.stream).is_none() {
            return Err(HarnessError::UnknownStream {
                index,
                stream: entry.stream.clone(),
            });
        }
        digest.push(entry);
        let t = entry.t_ms * 1_000;
        sim.run_until(t)?;
        if let Some(c) = controller.as_mut() {
            let mut tap = Tap {
                sim: &mut sim,
                log: &mut assignments,
            };
            c.poll(t, &mut tap)?;
            c.on_event(&entry.stream, entry.payload.clone(), t, &mut tap)?;
        }
        let Some(owner) = config.owner_of(&entry.stream) else { continue };
        let work = entry.work_us.or(owner.work_us).ok_or_else(|| HarnessError::NoWork {
            index,
            module: owner.id.clone(),
        })?;
        if controller.as_ref().map_or(true, |c| c.admits(&owner.id)) {
            sim.submit(SimJob::new(owner.id.clone(), t, work))?;
        } else {
            skipped[modules.iter().position(|m| *m == owner.id).expect("owner is a module")] += 1;
        }
    }
    let end = timeline.duration_ms * 1_000;
    sim.run_until(end)?;
    let mut recompute_count = 0;
    if let Some(c) = controller.as_mut() {
        c.flush(
            end,
            &mut Tap {
                sim: &mut sim,
                log: &mut assignments,
            },
        )?;
        recompute_count = c.recompute_count();
        for h in c.history() {
            if let Some(w) = &h.weights {
                weights.extend(w.iter().map(|(m, &weight)| WeightRow {
                    time_us: h.at,
                    module: m.clone(),
                    weight,
                }));
            }
        }
    }
    let trace = sim.finish()?;

    let module_metrics: Vec<ModuleMetrics> = modules
        .iter()
        .zip(&skipped)
        .map(|(m, &skipped)| {
            let jobs: Vec<&SimJob> = trace.jobs.iter().filter(|j| &j.module == m).collect();
            let turnaround: Micros = jobs.iter().map(|j| j.completion_us.unwrap_or(j.arrival_us) - j.arrival_us).sum();
            ModuleMetrics {
                module: m.clone(),
                jobs: jobs.len(),
                skipped,
                total_ms: turnaround as f64 / 1_000.0,
                makespan_ms: jobs.iter().filter_map(|j| j.completion_us).max().unwrap_or(0) as f64 / 1_000.0,
                cpu_ms: trace.cpu_us(m) as f64 / 1_000.0,
                speedup: None,
            }
        })
        .collect();

    let report = MetricsReport {
        variant,
        timeline: timeline.name.clone(),
        processors: config.scheduler.processors,
        total_ms: module_metrics.iter().map(|m| m.total_ms).sum(),
        makespan_ms: trace.makespan_us() as f64 / 1_000.0,
        modules: module_metrics,
        speedup: None,
        weights,
        recompute_count,
        assignments,
        events: timeline.entries.len(),
        skipped_jobs: skipped.iter().sum(),
        input_digest: digest.hex(),
    };
    Ok(Replay { report, trace })
}

fn ratio(base: f64, variant: f64) -> Option<f64> {
    if variant > 0.0 {
        Some(base / variant)
    } else if base == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

/// All three variants replayed on the same timeline.
#[derive(Debug, Clone)]
pub struct Comparison {
    /// Baseline, cfs_ca, rt_ca, in that order.
    pub replays: Vec<Replay>,
}

impl Comparison {
    pub fn get(&self, variant: Variant) -> &Replay {
        self.replays.iter().find(|r| r.report.variant == variant).expect("every variant is replayed")
    }

    pub fn speedup(&self, variant: Variant) -> Option<f64> {
        self.get(variant).report.speedup
    }

    /// `variant,module,total_ms,makespan_ms,speedup` rows, one `all` row per
    /// variant after its modules.
    pub fn summary_rows(&self) -> Vec<[String; 5]> {
        self.replays.iter().flat_map(|r| summary_rows(&r.report)).collect()
    }

    /// Writes each variant's traces under `out/<variant>/` and the combined
    /// `out/summary.csv`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let mut written = Vec::new();
        for r in &self.replays {
            written.extend(emit_traces(r, &out.join(r.report.variant.as_str()))?);
        }
        let path = out.join("summary.csv");
        write_rows(&path, &SUMMARY_HEADER, self.summary_rows())?;
        written.push(path);
        Ok(written)
    }
}

pub fn compare(timeline: &Timeline, config: &ControllerConfig) -> Result<Comparison, HarnessError> {
    compare_with(timeline, config, ReplayOptions::default())
}

/// Runs the three variants concurrently and fills in their speedups.
pub fn compare_with(timeline: &Timeline, config: &ControllerConfig, opts: ReplayOptions) -> Result<Comparison, HarnessError> {
    let results: Vec<Result<Replay, HarnessError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = Variant::ALL
            .into_iter()
            .map(|v| scope.spawn(move || replay_with(timeline, config, v, opts)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("replay thread panicked")).collect()
    });
    let mut replays = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let digest = replays[0].report.input_digest.clone();
    if let Some(other) = replays.iter().find(|r| r.report.input_digest != digest) {
        return Err(HarnessError::DigestMismatch(format!(
            "baseline {digest} vs {} {}",
            other.report.variant, other.report.input_digest
        )));
    }
    let base = replays[0].report.clone();
    for r in &mut replays {
        r.report.speedup = ratio(base.makespan_ms, r.report.makespan_ms);
        for (m, b) in r.report.modules.iter_mut().zip(&base.modules) {
            m.speedup = ratio(b.total_ms, m.total_ms);
        }
    }
    Ok(Comparison { replays })
}

const SUMMARY_HEADER: [&str; 5] = ["variant", "module", "total_ms", "makespan_ms", "speedup"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_rows(r: &MetricsReport) -> Vec<[String; 5]> {
    let v = r.variant.to_string();
    let mut rows: Vec<[String; 5]> = r
        .modules
        .iter()
        .map(|m| {
            [
                v.clone(),
                m.module.to_string(),
                m.total_ms.to_string(),
                m.makespan_ms.to_string(),
                opt(m.speedup),
            ]
        })
        .collect();
    rows.push([
        v,
        "all".into(),
        r.total_ms.to_string(),
        r.makespan_ms.to_string(),
        opt(r.speedup),
    ]);
    rows
}

fn write_rows<R, I>(path: &Path, header: &[&str], rows: I) -> Result<(), HarnessError>
where
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
    I: IntoIterator<Item = R>,
{
    let csv_err = |e: csv::Error| HarnessError::Csv {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = std::fs::File::create(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Writes weights.csv, shares.csv, jobs.csv and summary.csv into `out_dir`,
/// plus trace.csv with the simulator's per-module spans.
pub fn emit_traces(replay: &Replay, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let r = &replay.report;
    let t = &replay.trace;
    let paths: Vec<PathBuf> = ["weights.csv", "shares.csv", "jobs.csv", "summary.csv", "trace.csv"]
        .iter()
        .map(|f| out_dir.join(f))
        .collect();

    write_rows(
        &paths[0],
        &["time_us", "module", "weight"],
        r.weights
            .iter()
            .map(|w| [w.time_us.to_string(), w.module.to_string(), w.weight.to_string()]),
    )?;
    write_rows(
        &paths[1],
        &["time_us", "module", "share"],
        t.shares
            .iter()
            .map(|s| [s.time_us.to_string(), s.module.to_string(), s.value.to_string()]),
    )?;
    write_rows(
        &paths[2],
        &["module", "arrival_us", "work_us", "completion_us"],
        t.jobs.iter().map(|j| {
            [
                j.module.to_string(),
                j.arrival_us.to_string(),
                j.work_us.to_string(),
                j.completion_us.map(|c| c.to_string()).unwrap_or_default(),
            ]
        }),
    )?;
    write_rows(&paths[3], &SUMMARY_HEADER, summary_rows(r))?;

    let file = std::fs::File::create(&paths[4]).map_err(|source| HarnessError::Io {
        path: paths[4].display().to_string(),
        source,
    })?;
    let mut buf = std::io::BufWriter::new(file);
    t.write_csv(&mut buf).map_err(|e| HarnessError::Csv {
        path: paths[4].display().to_string(),
        message: e.to_string(),
    })?;
    buf.flush().map_err(|source| HarnessError::Io {
        path: paths[4].display().to_string(),
        source,
    })?;
    Ok(paths)
}
