//! Controller configuration file.
//!
//! The file is TOML with these sections:
//!
//! ```toml
//! [scheduler]
//! mode = "cfs"                 # or "rt"
//! processors = 4
//! period_us = 1000000          # RT period, (0, 1000000]
//! quantum_us = 1000            # simulator quantum; must divide period_us
//! min_recompute_interval_us = 0
//! strict_cap = false           # simulator: hard-cap CFS shares
//!
//! [[inputs]]                   # external inputs fed by sensors or timelines
//! id = "imu"
//! [[inputs]]
//! id = "slam/status"
//! kind = "topic"               # delivered through the pub-sub bus
//!
//! [[streams]]                  # derived streams; `value` is the parent payload
//! id = "imu_moving"
//! source = "imu"
//! filter = "value.accelerometer.x != 0"
//! map = "norm(value.accelerometer)"   # optional, applied after the filter
//!
//! [[modules]]
//! id = "speech"
//! priority = 1.0
//! score_expr = "1"             # optional, defaults to a constant 1
//! graph = "speech"             # optional, a [[tasks]] id
//! triggers = ["mic"]           # inputs whose entries create work for this module
//! work_us = 800000             # default CPU cost per triggered job
//!
//! [[rules]]
//! id = "quiet_while_moving"
//! module = "speech"
//! condition_expr = "norm(imu.accelerometer) > 0"
//! forced_weight = 0.0
//!
//! [[tasks]]                    # see `task::TaskDescription`
//! ```
//!
//! A module's scheduling weight is `priority * score_expr`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::alloc::MAX_PERIOD_US;
use super::{ModuleId, SchedulerMode};
use crate::expr::Expr;
use crate::task::{TaskDescription, TaskError, TaskGraph};

/// Name of the internal stream emitted once at start-up.
pub const INIT_STREAM: &str = "__init";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config declares no modules")]
    NoModules,
    #[error("module `{0}` must have a positive, finite priority")]
    NonPositivePriority(ModuleId),
    #[error("{context} references unknown stream `{stream}`")]
    UnknownStream { context: String, stream: String },
    #[error("{context} references unknown module `{module}`")]
    UnknownModule { context: String, module: String },
    #[error("module `{module}` references unknown task graph `{graph}`")]
    UnknownGraph { module: String, graph: String },
    #[error("duplicate id `{0}`")]
    Duplicate(String),
    #[error("input `{input}` is triggered by both `{first}` and `{second}`")]
    SharedTrigger { input: String, first: String, second: String },
    #[error("invalid scheduler section: {0}")]
    Scheduler(String),
    #[error("rule `{0}` needs a non-negative forced_weight")]
    NegativeForcedWeight(String),
    #[error("stream `{0}` needs a filter or a map")]
    EmptyStream(String),
    #[error("ids starting with `__` are reserved: `{0}`")]
    Reserved(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn default_period() -> u64 {
    MAX_PERIOD_US
}

fn default_quantum() -> u64 {
    1_000
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    pub mode: SchedulerMode,
    pub processors: u32,
    #[serde(default = "default_period")]
    pub period_us: u64,
    #[serde(default = "default_quantum")]
    pub quantum_us: u64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub min_recompute_interval_us: u64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub strict_cap: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    #[default]
    Sensor,
    Topic,
}

impl InputKind {
    fn is_sensor(&self) -> bool {
        *self == InputKind::Sensor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "InputKind::is_sensor")]
    pub kind: InputKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub id: ModuleId,
    pub priority: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_expr: Option<Expr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triggers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub id: String,
    pub module: ModuleId,
    pub condition_expr: Expr,
    #[serde(default)]
    pub forced_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub inputs: Vec<InputSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub streams: Vec<StreamSpec>,
    pub modules: Vec<ModuleSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<RuleSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskDescription>,
}

/// Reads, parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ControllerConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ControllerConfig::from_toml_str(&text)
}

impl ControllerConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: ControllerConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn module(&self, id: &ModuleId) -> Option<&ModuleSpec> {
        self.modules.iter().find(|m| m.id == *id)
    }

    pub fn input(&self, id: &str) -> Option<&InputSpec> {
        self.inputs.iter().find(|i| i.id == id)
    }

    /// Module whose jobs an entry on `input` creates, if any.
    pub fn owner_of(&self, input: &str) -> Option<&ModuleSpec> {
        self.modules.iter().find(|m| m.triggers.iter().any(|t| t == input))
    }

    /// Streams any score expression or rule condition depends on, directly
    /// or through derived streams.
    pub fn score_relevant_inputs(&self) -> BTreeSet<String> {
        let mut direct: BTreeSet<String> = self
            .modules
            .iter()
            .filter_map(|m| m.score_expr.as_ref())
            .chain(self.rules.iter().map(|r| &r.condition_expr))
            .flat_map(Expr::streams)
            .collect();
        // Walk derived streams back to their inputs.
        for s in self.streams.iter().rev() {
            if direct.contains(&s.id) {
                direct.insert(s.source.clone());
            }
        }
        direct.into_iter().filter(|s| self.input(s).is_some()).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let sched = &self.scheduler;
        if sched.processors == 0 {
            return Err(ConfigError::Scheduler("processors must be >= 1".into()));
        }
        if sched.period_us == 0 || sched.period_us > MAX_PERIOD_US {
            return Err(ConfigError::Scheduler(format!(
                "period_us must be in (0, {MAX_PERIOD_US}], got {}",
                sched.period_us
            )));
        }
        if sched.quantum_us == 0 || sched.period_us % sched.quantum_us != 0 {
            return Err(ConfigError::Scheduler(format!(
                "quantum_us {} must be positive and divide period_us {}",
                sched.quantum_us, sched.period_us
            )));
        }
        if self.modules.is_empty() {
            return Err(ConfigError::NoModules);
        }

        let mut ids = BTreeSet::new();
        let mut claim = |id: &str| -> Result<(), ConfigError> {
            if id.starts_with("__") {
                return Err(ConfigError::Reserved(id.into()));
            }
            if !ids.insert(id.to_string()) {
                return Err(ConfigError::Duplicate(id.into()));
            }
            Ok(())
        };
        let mut known: BTreeSet<String> = BTreeSet::new();
        for input in &self.inputs {
            claim(&input.id)?;
            known.insert(input.id.clone());
        }
        for s in &self.streams {
            claim(&s.id)?;
            if !known.contains(&s.source) {
                return Err(ConfigError::UnknownStream {
                    context: format!("stream `{}`", s.id),
                    stream: s.source.clone(),
                });
            }
            if s.filter.is_none() && s.map.is_none() {
                return Err(ConfigError::EmptyStream(s.id.clone()));
            }
            for e in s.filter.iter().chain(s.map.iter()) {
                if let Some(bad) = e.streams().into_iter().find(|r| r != "value") {
                    return Err(ConfigError::UnknownStream {
                        context: format!("stream `{}` (only `value` is in scope)", s.id),
                        stream: bad,
                    });
                }
            }
            known.insert(s.id.clone());
        }
        let resolve = |context: String, e: &Expr| -> Result<(), ConfigError> {
            match e.streams().into_iter().find(|s| !known.contains(s)) {
                Some(stream) => Err(ConfigError::UnknownStream { context, stream }),
                None => Ok(()),
            }
        };

        let task_ids: BTreeSet<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        let mut owners: std::collections::BTreeMap<&str, &ModuleId> = Default::default();
        let mut module_ids = BTreeSet::new();
        for m in &self.modules {
            if m.id.as_str().starts_with("__") {
                return Err(ConfigError::Reserved(m.id.to_string()));
            }
            if !module_ids.insert(&m.id) {
                return Err(ConfigError::Duplicate(m.id.to_string()));
            }
            if !(m.priority.is_finite() && m.priority > 0.0) {
                return Err(ConfigError::NonPositivePriority(m.id.clone()));
            }
            if let Some(e) = &m.score_expr {
                resolve(format!("module `{}`", m.id), e)?;
            }
            if let Some(g) = &m.graph {
                if !task_ids.contains(g.as_str()) {
                    return Err(ConfigError::UnknownGraph {
                        module: m.id.to_string(),
                        graph: g.clone(),
                    });
                }
            }
            for t in &m.triggers {
                if self.input(t).is_none() {
                    return Err(ConfigError::UnknownStream {
                        context: format!("module `{}` triggers", m.id),
                        stream: t.clone(),
                    });
                }
                if let Some(first) = owners.insert(t, &m.id) {
                    return Err(ConfigError::SharedTrigger {
                        input: t.clone(),
                        first: first.to_string(),
                        second: m.id.to_string(),
                    });
                }
            }
            if m.work_us == Some(0) {
                return Err(ConfigError::Parse(format!("module `{}`: work_us must be positive", m.id)));
            }
        }

        let mut rule_ids = BTreeSet::new();
        for r in &self.rules {
            if !rule_ids.insert(&r.id) {
                return Err(ConfigError::Duplicate(r.id.clone()));
            }
            if !module_ids.contains(&r.module) {
                return Err(ConfigError::UnknownModule {
                    context: format!("rule `{}`", r.id),
                    module: r.module.to_string(),
                });
            }
            if !(r.forced_weight.is_finite() && r.forced_weight >= 0.0) {
                return Err(ConfigError::NegativeForcedWeight(r.id.clone()));
            }
            resolve(format!("rule `{}`", r.id), &r.condition_expr)?;
        }

        let mut seen_tasks = BTreeSet::new();
        for t in &self.tasks {
            if !seen_tasks.insert(&t.id) {
                return Err(ConfigError::Duplicate(t.id.clone()));
            }
            let graph = TaskGraph::build(t)?;
            for stream in graph.referenced_streams() {
                if !known.contains(&stream) {
                    return Err(ConfigError::UnknownStream {
                        context: format!("task `{}`", t.id),
                        stream,
                    });
                }
            }
        }
        Ok(())
    }
}
