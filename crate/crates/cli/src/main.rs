//! `ctxsched`: validate configs, replay timelines, compare scheduler
//! variants and export their traces.
//!
//! Exit codes: 0 on success, 1 when the invocation, config or timeline is
//! invalid, 2 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxsched_core::harness::{replay_with, compare_with, HarnessError, ReplayOptions};
use ctxsched_core::{emit_traces, load_config, load_timeline, ControllerConfig, MetricsReport, Timeline, Variant};

#[derive(Parser)]
#[command(name = "ctxsched", version, about = "Context-aware CPU allocation for robot software")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config, and optionally a timeline against it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Replay a timeline under one variant.
    Replay {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "cfs_ca")]
        variant: Variant,
        /// Directory for weights.csv, shares.csv, jobs.csv, summary.csv and trace.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a timeline under every variant and print the speedups.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every variant's traces without printing a table.
    Export {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply assignments to real cgroups while reading events from stdin,
    /// one `{"stream": ..., "payload": ...}` object per line.
    Live {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding one cgroup per module id.
        #[arg(long)]
        cgroup_root: PathBuf,
        #[arg(long)]
        i_have_cgroup_permissions: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    timeline: PathBuf,
    #[arg(long)]
    processors: Option<u32>,
    #[arg(long)]
    quantum_us: Option<u64>,
    #[arg(long)]
    period_us: Option<u64>,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl ToString) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::Timeline(_) | HarnessError::UnknownStream { .. } | HarnessError::NoWork { .. } => {
                Failure::invalid(e)
            }
            _ => Failure::runtime(e),
        }
    }
}

impl RunArgs {
    fn load(&self) -> Result<(ControllerConfig, Timeline, ReplayOptions), Failure> {
        let config = load_config(&self.config).map_err(Failure::invalid)?;
        let timeline = load_timeline(&self.timeline).map_err(Failure::invalid)?;
        let opts = ReplayOptions {
            processors: self.processors,
            quantum_us: self.quantum_us,
            period_us: self.period_us,
        };
        Ok((config, timeline, opts))
    }
}

fn fmt_speedup(s: Option<f64>) -> String {
    s.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn print_table(reports: &[&MetricsReport]) {
    println!("{:<10} {:<12} {:>14} {:>14} {:>8}", "variant", "module", "total_ms", "makespan_ms", "speedup");
    for r in reports {
        for m in &r.modules {
            println!(
                "{:<10} {:<12} {:>14.3} {:>14.3} {:>8}",
                r.variant.as_str(),
                m.module.as_str(),
                m.total_ms,
                m.makespan_ms,
                fmt_speedup(m.speedup)
            );
        }
        println!(
            "{:<10} {:<12} {:>14.3} {:>14.3} {:>8}",
            r.variant.as_str(),
            "all",
            r.total_ms,
            r.makespan_ms,
            fmt_speedup(r.speedup)
        );
    }
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        log::info!("wrote {}", p.display());
    }
}

fn validate(config: &Path, timeline: Option<&Path>) -> Result<(), Failure> {
    let config = load_config(config).map_err(Failure::invalid)?;
    println!(
        "config ok: {} modules, {} inputs, {} streams, {} rules, {} task graphs",
        config.modules.len(),
        config.inputs.len(),
        config.streams.len(),
        config.rules.len(),
        config.tasks.len()
    );
    if let Some(path) = timeline {
        let t = load_timeline(path).map_err(Failure::invalid)?;
        for (i, e) in t.entries.iter().enumerate() {
            if config.input(&e.stream).is_none() {
                return Err(Failure::invalid(format!("timeline entry {i}: stream `{}` is not an input", e.stream)));
            }
            if let Some(owner) = config.owner_of(&e.stream) {
                if e.work_us.or(owner.work_us).is_none() {
                    return Err(Failure::invalid(format!("timeline entry {i}: no work_us for module `{}`", owner.id)));
                }
            }
        }
        println!("timeline ok: {} entries over {} ms", t.entries.len(), t.duration_ms);
    }
    Ok(())
}

#[cfg(feature = "cgroup")]
fn live(config: &Path, root: &Path) -> Result<(), Failure> {
    use std::io::BufRead;

    use ctxsched_core::cgroup::{CgroupTarget, CgroupWriter};
    use ctxsched_core::Controller;

    let config = load_config(config).map_err(Failure::invalid)?;
    let modules: Vec<_> = config.modules.iter().map(|m| m.id.clone()).collect();
    let mut writer =
        CgroupWriter::new(CgroupTarget::under(root, &modules, config.scheduler.mode)).map_err(Failure::runtime)?;
    let mut controller = Controller::new(config).map_err(Failure::invalid)?;
    let start = std::time::Instant::now();
    let now = || start.elapsed().as_micros() as u64;
    let initial = controller.init(&mut writer).map_err(Failure::runtime)?;
    log::info!("epoch {} applied", initial.epoch);
    for (n, line) in std::io::stdin().lock().lines().enumerate() {
        let line = line.map_err(Failure::runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Failure::invalid(format!("stdin line {}: {e}", n + 1)))?;
        let Some(stream) = v.get("stream").and_then(|s| s.as_str()) else {
            return Err(Failure::invalid(format!("stdin line {}: missing \"stream\"", n + 1)));
        };
        let payload = v.get("payload").cloned().unwrap_or(serde_json::Value::Null);
        let at = now();
        controller.poll(at, &mut writer).map_err(Failure::runtime)?;
        if let Some(a) = controller.on_event(stream, payload, at, &mut writer).map_err(Failure::runtime)? {
            println!("epoch {} at {at} us: {:?}", a.epoch, a.allocations);
        }
    }
    controller.flush(now(), &mut writer).map_err(Failure::runtime)?;
    Ok(())
}

#[cfg(not(feature = "cgroup"))]
fn live(_config: &Path, _root: &Path) -> Result<(), Failure> {
    Err(Failure::runtime("this build has no cgroup support; rebuild with `--features cgroup`"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { config, timeline } => validate(&config, timeline.as_deref()),
        Command::Replay { run, variant, out } => {
            let (config, timeline, opts) = run.load()?;
            let r = replay_with(&timeline, &config, variant, opts)?;
            print_table(&[&r.report]);
            if let Some(out) = out {
                report_written(&emit_traces(&r, &out)?);
            }
            Ok(())
        }
        Command::Compare { run, out } => {
            let (config, timeline, opts) = run.load()?;
            let c = compare_with(&timeline, &config, opts)?;
            print_table(&c.replays.iter().map(|r| &r.report).collect::<Vec<_>>());
            if let Some(out) = out {
                report_written(&c.write(&out)?);
            }
            Ok(())
        }
        Command::Export { run, out } => {
            let (config, timeline, opts) = run.load()?;
            let written = compare_with(&timeline, &config, opts)?.write(&out)?;
            report_written(&written);
            Ok(())
        }
        Command::Live {
            config,
            cgroup_root,
            i_have_cgroup_permissions,
        } => {
            if !i_have_cgroup_permissions {
                return Err(Failure::invalid(
                    "`live` writes to kernel cgroup files; pass --i-have-cgroup-permissions to proceed",
                ));
            }
            live(&config, &cgroup_root)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
