//! The controller: score streams in, CPU allocations out.
//!
//! Each module's score expression becomes a stream over the inputs it names.
//! All score streams are combined into one aggregate, context rules become
//! boolean streams, and every input event that changes the effective score
//! vector yields a new [`ScheduleAssignment`] for the backend.

mod alloc;
pub mod config;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use alloc::{apply_context_rules, compute_cfs_shares, compute_rt_slices, AllocError, RuleState, MAX_PERIOD_US};
pub use config::{load_config, ConfigError, ControllerConfig, InputKind, ModuleSpec, RuleSpec, SchedulerSection, StreamSpec, INIT_STREAM};

use crate::backend::{Backend, BackendError};
use crate::expr::Expr;
use crate::pubsub::{topic_as_stream_named, Bus, BusError, Schema, TopicStream};
use crate::reactive::{Dispatcher, Micros, SourceDescriptor, StageError, StreamError, StreamId};
use crate::task::{ContextOverlay, StreamState, TaskError, TaskGraph};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModuleId(String);

impl ModuleId {
    pub fn new(id: impl Into<String>) -> Self {
        ModuleId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModuleId {
    fn from(s: &str) -> Self {
        ModuleId(s.into())
    }
}

impl From<String> for ModuleId {
    fn from(s: String) -> Self {
        ModuleId(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerMode {
    Cfs,
    Rt,
}

/// Scheduling score `w` per module.
pub type ScoreSet = BTreeMap<ModuleId, f64>;

#[derive(Debug, Clone, PartialEq)]
pub enum Allocations {
    /// Fractional cores per module.
    Cfs { shares: BTreeMap<ModuleId, f64> },
    /// RT runtime per module, in microseconds per `period_us`.
    Rt { period_us: u64, slices: BTreeMap<ModuleId, u64> },
}

impl Allocations {
    pub fn mode(&self) -> SchedulerMode {
        match self {
            Allocations::Cfs { .. } => SchedulerMode::Cfs,
            Allocations::Rt { .. } => SchedulerMode::Rt,
        }
    }

    /// Share in cores, or slice in microseconds, as a float.
    pub fn get(&self, module: &ModuleId) -> Option<f64> {
        match self {
            Allocations::Cfs { shares } => shares.get(module).copied(),
            Allocations::Rt { slices, .. } => slices.get(module).map(|&t| t as f64),
        }
    }

    pub fn values(&self) -> Box<dyn Iterator<Item = (&ModuleId, f64)> + '_> {
        match self {
            Allocations::Cfs { shares } => Box::new(shares.iter().map(|(m, &s)| (m, s))),
            Allocations::Rt { slices, .. } => Box::new(slices.iter().map(|(m, &t)| (m, t as f64))),
        }
    }

    pub fn total(&self) -> f64 {
        self.values().map(|(_, v)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleAssignment {
    /// 0 for the initial policy, then 1, 2, ... per emitted assignment.
    pub epoch: u64,
    pub allocations: Allocations,
}

impl ScheduleAssignment {
    pub fn mode(&self) -> SchedulerMode {
        self.allocations.mode()
    }

    pub fn get(&self, module: &ModuleId) -> Option<f64> {
        self.allocations.get(module)
    }

    pub fn values(&self) -> Box<dyn Iterator<Item = (&ModuleId, f64)> + '_> {
        self.allocations.values()
    }

    pub fn total(&self) -> f64 {
        self.allocations.total()
    }

    /// Equal split of the machine across `modules`.
    pub fn equal(modules: &[ModuleId], mode: SchedulerMode, processors: u32, period_us: u64) -> Result<Self, AllocError> {
        let unit: ScoreSet = modules.iter().map(|m| (m.clone(), 1.0)).collect();
        match mode {
            SchedulerMode::Cfs => compute_cfs_shares(&unit, processors),
            SchedulerMode::Rt => compute_rt_slices(&unit, period_us),
        }
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("controller has not been initialized")]
    NotInitialized,
    #[error("controller is already initialized")]
    AlreadyInitialized,
    #[error("`{0}` is not an input of this configuration")]
    UnknownInput(String),
    #[error("backend rejected assignment epoch {}: {source}", assignment.epoch)]
    Backend {
        assignment: Box<ScheduleAssignment>,
        source: BackendError,
    },
}

/// One emitted assignment together with the weights it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub at: Micros,
    /// Effective weights, or `None` for an equal split made before every
    /// score stream had fired.
    pub weights: Option<ScoreSet>,
    pub assignment: ScheduleAssignment,
}

#[derive(Debug, Default)]
struct Signals {
    raw: Option<ScoreSet>,
    rule_active: Vec<bool>,
    dirty: bool,
}

pub struct Controller {
    config: ControllerConfig,
    dispatcher: Dispatcher,
    bus: Bus,
    topics: BTreeMap<String, TopicStream>,
    modules: Vec<ModuleId>,
    signals: Rc<RefCell<Signals>>,
    graphs: BTreeMap<ModuleId, TaskGraph>,
    overlays: BTreeMap<ModuleId, Vec<ContextOverlay>>,
    initialized: bool,
    epoch: u64,
    effective: Option<ScoreSet>,
    pending: bool,
    last_emit_at: Micros,
    history: Vec<HistoryEntry>,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller")
            .field("modules", &self.modules)
            .field("epoch", &self.epoch)
            .field("initialized", &self.initialized)
            .finish_non_exhaustive()
    }
}

fn combined_env(names: &[String], tuple: &Value) -> Result<BTreeMap<String, Value>, StageError> {
    let items = tuple.as_array().ok_or_else(|| StageError("combined payload is not an array".into()))?;
    Ok(names.iter().cloned().zip(items.iter().cloned()).collect())
}

impl Controller {
    /// Builds the stream graph for `config` with a private message bus.
    pub fn new(config: ControllerConfig) -> Result<Self, ControllerError> {
        Self::with_bus(config, Bus::new())
    }

    /// Builds the stream graph; topic inputs are read from `bus` (topics are
    /// created as JSON topics when missing).
    pub fn with_bus(config: ControllerConfig, bus: Bus) -> Result<Self, ControllerError> {
        config.validate()?;
        let mut dispatcher = Dispatcher::new();
        let mut topics = BTreeMap::new();
        for input in &config.inputs {
            match input.kind {
                InputKind::Sensor => {
                    dispatcher.create_stream(SourceDescriptor::Input(input.id.clone()))?;
                }
                InputKind::Topic => {
                    if bus.schema(&input.id).is_none() {
                        bus.create_topic(&input.id, Schema::Json)?;
                    }
                    let wrapper = topic_as_stream_named(&bus, &mut dispatcher, &input.id, &input.id)?;
                    topics.insert(input.id.clone(), wrapper);
                }
            }
        }
        let init = dispatcher.create_stream(SourceDescriptor::Input(INIT_STREAM.into()))?;

        for s in &config.streams {
            let parent = StreamId::new(&s.source);
            let id = StreamId::new(&s.id);
            match (&s.filter, &s.map) {
                (Some(f), None) => {
                    dispatcher.filter_as(id, &parent, value_predicate(f.clone()))?;
                }
                (None, Some(m)) => {
                    dispatcher.map_as(id, &parent, value_transform(m.clone()))?;
                }
                (Some(f), Some(m)) => {
                    let mid = dispatcher.filter(&parent, value_predicate(f.clone()))?;
                    dispatcher.map_as(id, &mid, value_transform(m.clone()))?;
                }
                (None, None) => unreachable!("validated"),
            }
        }

        let signals = Rc::new(RefCell::new(Signals {
            rule_active: vec![false; config.rules.len()],
            ..Signals::default()
        }));

        let mut score_streams = Vec::new();
        let mut modules = Vec::new();
        for m in &config.modules {
            let expr = m.score_expr.clone().unwrap_or_else(|| Expr::parse("1").expect("constant parses"));
            let priority = m.priority;
            let module = m.id.clone();
            let (inputs, names) = expr_inputs(&expr, &init);
            let joined = dispatcher.combine_latest_as(format!("__score/{}/in", m.id), &inputs)?;
            let score = dispatcher.map_as(format!("__score/{}", m.id), &joined, move |tuple| {
                let env = combined_env(&names, tuple)?;
                let w = priority * expr.eval_f64(&env)?;
                if !(w.is_finite() && w >= 0.0) {
                    return Err(StageError(format!("score {w} for `{module}` is negative or not finite")));
                }
                Ok(json!(w))
            })?;
            score_streams.push(score);
            modules.push(m.id.clone());
        }

        let aggregate = dispatcher.combine_latest_as("__scores", &score_streams)?;
        {
            let signals = Rc::clone(&signals);
            let modules = modules.clone();
            dispatcher.subscribe(&aggregate, move |event| {
                let Some(items) = event.payload.as_array() else { return };
                let set: ScoreSet = modules
                    .iter()
                    .cloned()
                    .zip(items.iter().map(|v| v.as_f64().unwrap_or(0.0)))
                    .collect();
                let mut s = signals.borrow_mut();
                s.raw = Some(set);
                s.dirty = true;
            })?;
        }

        for (i, rule) in config.rules.iter().enumerate() {
            let (inputs, names) = expr_inputs(&rule.condition_expr, &init);
            let joined = dispatcher.combine_latest_as(format!("__rule/{}/in", rule.id), &inputs)?;
            let cond = rule.condition_expr.clone();
            let truth = dispatcher.map_as(format!("__rule/{}", rule.id), &joined, move |tuple| {
                let env = combined_env(&names, tuple)?;
                Ok(Value::Bool(cond.eval_bool(&env)?))
            })?;
            let signals = Rc::clone(&signals);
            dispatcher.subscribe(&truth, move |event| {
                let active = event.payload.as_bool().unwrap_or(false);
                let mut s = signals.borrow_mut();
                if s.rule_active[i] != active {
                    s.rule_active[i] = active;
                    s.dirty = true;
                }
            })?;
        }

        let mut graphs = BTreeMap::new();
        let mut overlays: BTreeMap<ModuleId, Vec<ContextOverlay>> = BTreeMap::new();
        for m in &config.modules {
            let Some(name) = &m.graph else { continue };
            let desc = config.tasks.iter().find(|t| &t.id == name).expect("validated");
            let mut graph = TaskGraph::build(desc)?;
            let (cores, _) = graph.capability_demand();
            if cores > config.scheduler.processors {
                log::warn!(
                    "module `{}` asks for {cores} cores but the machine has {}",
                    m.id,
                    config.scheduler.processors
                );
            }
            for rule in config.rules.iter().filter(|r| r.module == m.id && r.forced_weight == 0.0) {
                let overlay = ContextOverlay::gate_task(&graph, format!("context:{}", rule.id), rule.condition_expr.clone(), Some(0.0));
                graph = graph.apply_overlay(&overlay)?;
                overlays.entry(m.id.clone()).or_default().push(overlay);
            }
            graphs.insert(m.id.clone(), graph);
        }

        Ok(Controller {
            config,
            dispatcher,
            bus,
            topics,
            modules,
            signals,
            graphs,
            overlays,
            initialized: false,
            epoch: 0,
            effective: None,
            pending: false,
            last_emit_at: 0,
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn modules(&self) -> &[ModuleId] {
        &self.modules
    }

    pub fn mode(&self) -> SchedulerMode {
        self.config.scheduler.mode
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    /// The module's task graph with any context overlays applied.
    pub fn context_graph(&self, module: &ModuleId) -> Option<&TaskGraph> {
        self.graphs.get(module)
    }

    pub fn overlays(&self, module: &ModuleId) -> &[ContextOverlay] {
        self.overlays.get(module).map_or(&[], Vec::as_slice)
    }

    /// Every assignment emitted so far, the initial one included.
    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    /// Assignments emitted after the initial policy.
    pub fn recompute_count(&self) -> usize {
        self.history.iter().filter(|h| h.assignment.epoch > 0).count()
    }

    /// Current effective weights, once every score stream has fired.
    pub fn effective_scores(&self) -> Option<&ScoreSet> {
        self.effective.as_ref()
    }

    pub fn rule_states(&self) -> Vec<RuleState> {
        let s = self.signals.borrow();
        self.config
            .rules
            .iter()
            .zip(&s.rule_active)
            .map(|(r, &active)| RuleState {
                module: r.module.clone(),
                forced_weight: r.forced_weight,
                active,
            })
            .collect()
    }

    /// Fires the constant score streams, computes the initial policy and
    /// applies it at time 0 as epoch 0.
    pub fn init(&mut self, backend: &mut dyn Backend) -> Result<ScheduleAssignment, ControllerError> {
        if self.initialized {
            return Err(ControllerError::AlreadyInitialized);
        }
        self.dispatcher.emit(&StreamId::new(INIT_STREAM), Value::Null, 0)?;
        self.initialized = true;
        self.signals.borrow_mut().dirty = false;
        let weights = self.compute_effective();
        let assignment = match &weights {
            Some(w) => self.allocate(w)?,
            None => {
                let s = &self.config.scheduler;
                ScheduleAssignment::equal(&self.modules, s.mode, s.processors, s.period_us)?
            }
        };
        backend.apply(0, &assignment).map_err(|source| ControllerError::Backend {
            assignment: Box::new(assignment.clone()),
            source,
        })?;
        self.effective = weights.clone();
        self.history.push(HistoryEntry {
            at: 0,
            weights,
            assignment: assignment.clone(),
        });
        Ok(assignment)
    }

    /// Feeds one input value. Returns the new assignment when the event
    /// changed the effective score vector, after the backend accepted it.
    pub fn on_event(
        &mut self,
        input: &str,
        payload: Value,
        at: Micros,
        backend: &mut dyn Backend,
    ) -> Result<Option<ScheduleAssignment>, ControllerError> {
        if !self.initialized {
            return Err(ControllerError::NotInitialized);
        }
        if let Some(topic) = self.topics.get_mut(input) {
            self.bus.publish_json(input, &payload, at)?;
            topic.pump(&mut self.dispatcher)?;
        } else if self.config.input(input).is_some() {
            self.dispatcher.emit(&StreamId::new(input), payload, at)?;
        } else {
            return Err(ControllerError::UnknownInput(input.into()));
        }
        self.react(at, backend)
    }

    /// Recomputes after messages were published straight to topic inputs on
    /// the bus.
    pub fn pump_topics(&mut self, at: Micros, backend: &mut dyn Backend) -> Result<Option<ScheduleAssignment>, ControllerError> {
        if !self.initialized {
            return Err(ControllerError::NotInitialized);
        }
        for topic in self.topics.values_mut() {
            topic.pump(&mut self.dispatcher)?;
        }
        self.react(at, backend)
    }

    /// Emits a change held back by `min_recompute_interval_us` once the
    /// interval has passed.
    pub fn poll(&mut self, at: Micros, backend: &mut dyn Backend) -> Result<Option<ScheduleAssignment>, ControllerError> {
        if self.pending && at >= self.last_emit_at + self.config.scheduler.min_recompute_interval_us {
            return self.flush(at, backend);
        }
        Ok(None)
    }

    /// Emits any held-back change now.
    pub fn flush(&mut self, at: Micros, backend: &mut dyn Backend) -> Result<Option<ScheduleAssignment>, ControllerError> {
        if !self.pending {
            return Ok(None);
        }
        self.pending = false;
        match self.compute_effective() {
            Some(w) if Some(&w) != self.effective.as_ref() => self.emit(at, w, backend).map(Some),
            _ => Ok(None),
        }
    }

    fn react(&mut self, at: Micros, backend: &mut dyn Backend) -> Result<Option<ScheduleAssignment>, ControllerError> {
        if !std::mem::take(&mut self.signals.borrow_mut().dirty) {
            return Ok(None);
        }
        let Some(weights) = self.compute_effective() else {
            return Ok(None);
        };
        if Some(&weights) == self.effective.as_ref() {
            self.pending = false;
            return Ok(None);
        }
        let interval = self.config.scheduler.min_recompute_interval_us;
        if interval > 0 && self.epoch > 0 && at < self.last_emit_at + interval {
            self.pending = true;
            return Ok(None);
        }
        self.emit(at, weights, backend).map(Some)
    }

    fn compute_effective(&self) -> Option<ScoreSet> {
        let raw = self.signals.borrow().raw.clone()?;
        Some(apply_context_rules(&raw, &self.rule_states()))
    }

    fn allocate(&self, weights: &ScoreSet) -> Result<ScheduleAssignment, AllocError> {
        let s = &self.config.scheduler;
        match s.mode {
            SchedulerMode::Cfs => compute_cfs_shares(weights, s.processors),
            SchedulerMode::Rt => compute_rt_slices(weights, s.period_us),
        }
    }

    fn emit(&mut self, at: Micros, weights: ScoreSet, backend: &mut dyn Backend) -> Result<ScheduleAssignment, ControllerError> {
        let mut assignment = self.allocate(&weights)?;
        self.epoch += 1;
        assignment.epoch = self.epoch;
        backend.apply(at, &assignment).map_err(|source| ControllerError::Backend {
            assignment: Box::new(assignment.clone()),
            source,
        })?;
        self.pending = false;
        self.last_emit_at = at;
        self.effective = Some(weights.clone());
        self.history.push(HistoryEntry {
            at,
            weights: Some(weights),
            assignment: assignment.clone(),
        });
        Ok(assignment)
    }

    /// Whether a new job for `module` may start given the latest stream
    /// values: its task graph, context overlays included, must have at least
    /// one ready sub-task. Modules without a graph always admit.
    pub fn admits(&self, module: &ModuleId) -> bool {
        let Some(graph) = self.graphs.get(module) else {
            return true;
        };
        let mut streams = StreamState::new();
        for s in graph.referenced_streams() {
            streams.set(s.clone(), self.dispatcher.latest(&StreamId::new(s)).cloned());
        }
        let completion = graph.subtasks().into_iter().map(|s| (s, false)).collect();
        match graph.ready_subtasks(&streams, &completion) {
            Ok(ready) => !ready.is_empty(),
            Err(e) => {
                log::warn!("admission check for `{module}` failed: {e}");
                false
            }
        }
    }
}

fn expr_inputs(expr: &Expr, init: &StreamId) -> (Vec<StreamId>, Vec<String>) {
    let names = expr.streams();
    if names.is_empty() {
        (vec![init.clone()], vec![])
    } else {
        (names.iter().map(StreamId::new).collect(), names)
    }
}

fn value_predicate(e: Expr) -> impl Fn(&Value) -> Result<bool, StageError> {
    move |v| Ok(e.eval_bool(&crate::expr::ValueEnv(v))?)
}

fn value_transform(e: Expr) -> impl Fn(&Value) -> Result<Value, StageError> {
    move |v| Ok(e.eval_json(&crate::expr::ValueEnv(v))?)
}
