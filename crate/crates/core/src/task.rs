//! Tasks as a set of sub-tasks plus a relationship graph.
//!
//! A [`TaskGraph`] holds sub-task nodes together with the pre-conditions,
//! capability constraints and context conditions that relate to them. Edges
//! always point *into* a sub-task: `a -> b` means `b` depends on `a`, whether
//! `a` is a sub-task that must finish first, a pre-condition that must hold,
//! a resource constraint, or a context condition that gates `b`.
//!
//! A pre-condition gates only its direct targets. A context condition gates
//! its targets and everything downstream of them, so attaching one to the
//! roots of a graph switches off the whole task.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::expr::{Env, Expr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("task `{task}`: cycle through `{node}`")]
    Cycle { task: String, node: String },
    #[error("task `{task}`: edge {from} -> {to} references a missing node")]
    DanglingEdge { task: String, from: String, to: String },
    #[error("task `{task}`: edge {from} -> {to} must point at a sub-task")]
    EdgeIntoNonSubtask { task: String, from: String, to: String },
    #[error("task `{task}`: duplicate node id `{node}`")]
    DuplicateNode { task: String, node: String },
    #[error("task `{task}`: duplicate edge {from} -> {to}")]
    DuplicateEdge { task: String, from: String, to: String },
    #[error("task `{task}`: constraint `{node}` is not attached to any sub-task")]
    UnattachedConstraint { task: String, node: String },
    #[error("task `{task}`: constraint `{node}` needs cores >= 1 and memory > 0")]
    InvalidConstraint { task: String, node: String },
    #[error("task `{task}`: {message}")]
    InvalidKind { task: String, message: String },
    #[error("overlay targets `{overlay}` but the graph is `{graph}`")]
    TargetMismatch { overlay: String, graph: String },
    #[error("overlay node or edge `{0}` is not present in the graph")]
    OverlayNotApplied(String),
    #[error("completion state has no entry for sub-task `{0}`")]
    MissingSubtask(String),
    #[error("stream state has no entry for referenced stream `{0}`")]
    UnreferencedStream(String),
    #[error("bad satisfaction rule `{0}`")]
    BadRule(String),
}

/// Satisfaction rule of a complex task over sub-task completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rule {
    Done(String),
    All(Vec<Rule>),
    Any(Vec<Rule>),
    AtLeast(usize, Vec<Rule>),
}

impl Rule {
    pub fn parse(src: &str) -> Result<Rule, TaskError> {
        let bad = || TaskError::BadRule(src.to_string());
        let tokens: Vec<String> = {
            let mut out = Vec::new();
            let mut cur = String::new();
            for c in src.chars() {
                if c == '(' || c == ')' || c == ',' {
                    if !cur.trim().is_empty() {
                        out.push(cur.trim().to_string());
                    }
                    cur.clear();
                    out.push(c.to_string());
                } else {
                    cur.push(c);
                }
            }
            if !cur.trim().is_empty() {
                out.push(cur.trim().to_string());
            }
            out
        };
        let mut pos = 0;
        let rule = parse_rule(&tokens, &mut pos).ok_or_else(bad)?;
        if pos != tokens.len() {
            return Err(bad());
        }
        Ok(rule)
    }

    pub fn eval(&self, done: &dyn Fn(&str) -> bool) -> bool {
        match self {
            Rule::Done(id) => done(id),
            Rule::All(rs) => rs.iter().all(|r| r.eval(done)),
            Rule::Any(rs) => rs.iter().any(|r| r.eval(done)),
            Rule::AtLeast(k, rs) => rs.iter().filter(|r| r.eval(done)).count() >= *k,
        }
    }

    fn subtasks<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Rule::Done(id) => out.push(id),
            Rule::All(rs) | Rule::Any(rs) | Rule::AtLeast(_, rs) => rs.iter().for_each(|r| r.subtasks(out)),
        }
    }
}

fn parse_rule(tokens: &[String], pos: &mut usize) -> Option<Rule> {
    let head = tokens.get(*pos)?.clone();
    *pos += 1;
    if tokens.get(*pos).map(String::as_str) != Some("(") {
        let ok = head.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '-' || c == '/');
        return ok.then_some(Rule::Done(head));
    }
    *pos += 1;
    let mut k = None;
    if head == "at_least" {
        k = Some(tokens.get(*pos)?.parse::<usize>().ok()?);
        *pos += 1;
        if tokens.get(*pos)? != "," {
            return None;
        }
        *pos += 1;
    }
    let mut args = Vec::new();
    loop {
        args.push(parse_rule(tokens, pos)?);
        match tokens.get(*pos)?.as_str() {
            "," => *pos += 1,
            ")" => {
                *pos += 1;
                break;
            }
            _ => return None,
        }
    }
    match head.as_str() {
        "all" => Some(Rule::All(args)),
        "any" => Some(Rule::Any(args)),
        "at_least" => Some(Rule::AtLeast(k?, args)),
        _ => None,
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |f: &mut fmt::Formatter<'_>, rs: &[Rule]| -> fmt::Result {
            for (i, r) in rs.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write!(f, "{r}")?;
            }
            f.write_str(")")
        };
        match self {
            Rule::Done(id) => f.write_str(id),
            Rule::All(rs) => {
                f.write_str("all(")?;
                list(f, rs)
            }
            Rule::Any(rs) => {
                f.write_str("any(")?;
                list(f, rs)
            }
            Rule::AtLeast(k, rs) => {
                write!(f, "at_least({k}, ")?;
                list(f, rs)
            }
        }
    }
}

impl Serialize for Rule {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        Rule::parse(&String::deserialize(deserializer)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    /// A single sub-task.
    Elemental,
    /// Satisfied when every sub-task is done.
    Compound,
    /// Satisfied when the rule holds.
    Complex(Rule),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    SubTask,
    /// Holds when `requires` evaluates true against the latest stream values.
    PreCondition { requires: Expr },
    CapabilityConstraint { cores: u32, memory_mb: u64 },
    /// Blocks its downstream sub-tasks while `blocked_while` evaluates true.
    ContextCondition { blocked_while: Expr },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
}

impl GraphNode {
    fn condition(&self) -> Option<&Expr> {
        match &self.kind {
            NodeKind::PreCondition { requires } => Some(requires),
            NodeKind::ContextCondition { blocked_while } => Some(blocked_while),
            _ => None,
        }
    }
}

// Config-file shape of a task.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindName {
    Elemental,
    Compound,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreConditionSpec {
    pub id: String,
    pub requires: Expr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub id: String,
    pub cores: u32,
    pub memory_mb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConditionSpec {
    pub id: String,
    pub blocked_while: Expr,
}

/// A hand-authored task graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescription {
    pub id: String,
    pub kind: KindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    pub subtasks: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub preconditions: Vec<PreConditionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<ContextConditionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<(String, String)>,
}

/// Latest value per referenced stream; `None` means nothing has arrived yet.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamState(BTreeMap<String, Option<Value>>);

impl StreamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, stream: impl Into<String>, value: Option<Value>) -> &mut Self {
        self.0.insert(stream.into(), value);
        self
    }

    pub fn contains(&self, stream: &str) -> bool {
        self.0.contains_key(stream)
    }
}

impl Env for StreamState {
    fn lookup(&self, stream: &str) -> Option<&Value> {
        self.0.get(stream).and_then(Option::as_ref)
    }
}

/// Sub-task id to done/not-done.
pub type Completion = BTreeMap<String, bool>;

/// Additional context conditions for one task graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextOverlay {
    pub target: String,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(String, String)>,
    /// Score forced on the owning module while a condition blocks it.
    pub weight_override: Option<f64>,
}

impl ContextOverlay {
    pub fn empty(target: impl Into<String>) -> Self {
        ContextOverlay {
            target: target.into(),
            nodes: Vec::new(),
            edges: Vec::new(),
            weight_override: None,
        }
    }

    /// One context condition gating every root sub-task of `graph`, which
    /// blocks the whole task while `blocked_while` holds.
    pub fn gate_task(graph: &TaskGraph, id: impl Into<String>, blocked_while: Expr, weight_override: Option<f64>) -> Self {
        let id = id.into();
        let edges = graph.root_subtasks().into_iter().map(|s| (id.clone(), s)).collect();
        ContextOverlay {
            target: graph.task_id.clone(),
            nodes: vec![GraphNode {
                id,
                kind: NodeKind::ContextCondition { blocked_while },
            }],
            edges,
            weight_override,
        }
    }
}

/// A validated task graph: a DAG whose edges all end at sub-tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    pub task_id: String,
    pub kind: TaskKind,
    nodes: BTreeMap<String, GraphNode>,
    edges: BTreeSet<(String, String)>,
}

impl TaskGraph {
    /// Builds and validates a graph from its description.
    pub fn build(desc: &TaskDescription) -> Result<TaskGraph, TaskError> {
        let task = desc.id.clone();
        let mut nodes = BTreeMap::new();
        let mut add = |node: GraphNode| -> Result<(), TaskError> {
            if nodes.contains_key(&node.id) {
                return Err(TaskError::DuplicateNode {
                    task: task.clone(),
                    node: node.id,
                });
            }
            nodes.insert(node.id.clone(), node);
            Ok(())
        };
        for s in &desc.subtasks {
            add(GraphNode {
                id: s.clone(),
                kind: NodeKind::SubTask,
            })?;
        }
        for p in &desc.preconditions {
            add(GraphNode {
                id: p.id.clone(),
                kind: NodeKind::PreCondition { requires: p.requires.clone() },
            })?;
        }
        for c in &desc.constraints {
            add(GraphNode {
                id: c.id.clone(),
                kind: NodeKind::CapabilityConstraint {
                    cores: c.cores,
                    memory_mb: c.memory_mb,
                },
            })?;
        }
        for c in &desc.context {
            add(GraphNode {
                id: c.id.clone(),
                kind: NodeKind::ContextCondition {
                    blocked_while: c.blocked_while.clone(),
                },
            })?;
        }
        let mut edges = BTreeSet::new();
        for (from, to) in &desc.edges {
            if !edges.insert((from.clone(), to.clone())) {
                return Err(TaskError::DuplicateEdge {
                    task: desc.id.clone(),
                    from: from.clone(),
                    to: to.clone(),
                });
            }
        }
        let kind = match (&desc.kind, &desc.rule) {
            (KindName::Elemental, None) => TaskKind::Elemental,
            (KindName::Compound, None) => TaskKind::Compound,
            (KindName::Complex, Some(rule)) => TaskKind::Complex(rule.clone()),
            (KindName::Complex, None) => {
                return Err(TaskError::InvalidKind {
                    task: desc.id.clone(),
                    message: "complex tasks need a rule".into(),
                })
            }
            (_, Some(_)) => {
                return Err(TaskError::InvalidKind {
                    task: desc.id.clone(),
                    message: "only complex tasks take a rule".into(),
                })
            }
        };
        let graph = TaskGraph {
            task_id: desc.id.clone(),
            kind,
            nodes,
            edges,
        };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<(), TaskError> {
        let task = || self.task_id.clone();
        for (from, to) in &self.edges {
            if !self.nodes.contains_key(from) || !self.nodes.contains_key(to) {
                return Err(TaskError::DanglingEdge {
                    task: task(),
                    from: from.clone(),
                    to: to.clone(),
                });
            }
            if self.nodes[to].kind != NodeKind::SubTask {
                return Err(TaskError::EdgeIntoNonSubtask {
                    task: task(),
                    from: from.clone(),
                    to: to.clone(),
                });
            }
        }
        for node in self.nodes.values() {
            if let NodeKind::CapabilityConstraint { cores, memory_mb } = node.kind {
                if cores < 1 || memory_mb == 0 {
                    return Err(TaskError::InvalidConstraint {
                        task: task(),
                        node: node.id.clone(),
                    });
                }
                if !self.edges.iter().any(|(from, _)| *from == node.id) {
                    return Err(TaskError::UnattachedConstraint {
                        task: task(),
                        node: node.id.clone(),
                    });
                }
            }
        }
        let subtasks = self.subtasks();
        match &self.kind {
            TaskKind::Elemental if subtasks.len() != 1 => {
                return Err(TaskError::InvalidKind {
                    task: task(),
                    message: format!("elemental tasks have exactly one sub-task, found {}", subtasks.len()),
                })
            }
            TaskKind::Compound | TaskKind::Complex(_) if subtasks.is_empty() => {
                return Err(TaskError::InvalidKind {
                    task: task(),
                    message: "decomposable tasks need at least one sub-task".into(),
                })
            }
            TaskKind::Complex(rule) => {
                let mut refs = Vec::new();
                rule.subtasks(&mut refs);
                if let Some(bad) = refs.iter().find(|r| !subtasks.contains(&r.to_string())) {
                    return Err(TaskError::InvalidKind {
                        task: task(),
                        message: format!("rule references unknown sub-task `{bad}`"),
                    });
                }
            }
            _ => {}
        }
        self.check_acyclic()
    }

    fn check_acyclic(&self) -> Result<(), TaskError> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for (_, to) in &self.edges {
            *indegree.get_mut(to.as_str()).unwrap() += 1;
        }
        let mut ready: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut seen = 0;
        while let Some(n) = ready.pop() {
            seen += 1;
            for (from, to) in &self.edges {
                if from == n {
                    let d = indegree.get_mut(to.as_str()).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.push(to);
                    }
                }
            }
        }
        if seen == self.nodes.len() {
            Ok(())
        } else {
            let node = indegree.iter().find(|(_, d)| **d > 0).map(|(k, _)| k.to_string()).unwrap_or_default();
            Err(TaskError::Cycle {
                task: self.task_id.clone(),
                node,
            })
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.get(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = &(String, String)> {
        self.edges.iter()
    }

    pub fn subtasks(&self) -> Vec<String> {
        self.nodes
            .values()
            .filter(|n| n.kind == NodeKind::SubTask)
            .map(|n| n.id.clone())
            .collect()
    }

    /// Sub-tasks with no sub-task predecessor.
    pub fn root_subtasks(&self) -> Vec<String> {
        self.subtasks()
            .into_iter()
            .filter(|s| self.predecessors(s).all(|p| self.nodes[p].kind != NodeKind::SubTask))
            .collect()
    }

    fn predecessors<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(_, to)| to == id).map(|(from, _)| from.as_str())
    }

    /// Streams referenced by any condition node.
    pub fn referenced_streams(&self) -> BTreeSet<String> {
        self.nodes.values().filter_map(GraphNode::condition).flat_map(Expr::streams).collect()
    }

    /// Largest per-sub-task core demand and total memory demand.
    pub fn capability_demand(&self) -> (u32, u64) {
        self.nodes.values().fold((0, 0), |(c, m), n| match n.kind {
            NodeKind::CapabilityConstraint { cores, memory_mb } => (c.max(cores), m + memory_mb),
            _ => (c, m),
        })
    }

    pub fn is_satisfied(&self, completion: &Completion) -> Result<bool, TaskError> {
        let subtasks = self.subtasks();
        for s in &subtasks {
            if !completion.contains_key(s) {
                return Err(TaskError::MissingSubtask(s.clone()));
            }
        }
        Ok(match &self.kind {
            TaskKind::Elemental | TaskKind::Compound => subtasks.iter().all(|s| completion[s]),
            TaskKind::Complex(rule) => rule.eval(&|id| completion.get(id).copied().unwrap_or(false)),
        })
    }

    /// Sub-tasks that are not done yet and may start now.
    pub fn ready_subtasks(&self, streams: &StreamState, completion: &Completion) -> Result<BTreeSet<String>, TaskError> {
        if let Some(missing) = self.referenced_streams().into_iter().find(|s| !streams.contains(s)) {
            return Err(TaskError::UnreferencedStream(missing));
        }
        let subtasks = self.subtasks();
        for s in &subtasks {
            if !completion.contains_key(s) {
                return Err(TaskError::MissingSubtask(s.clone()));
            }
        }
        // Sub-tasks downstream of a context condition that currently blocks.
        let mut blocked = BTreeSet::new();
        for node in self.nodes.values() {
            if let NodeKind::ContextCondition { blocked_while } = &node.kind {
                if blocked_while.eval_bool(streams).unwrap_or(false) {
                    let mut stack = vec![node.id.as_str()];
                    while let Some(cur) = stack.pop() {
                        for (from, to) in &self.edges {
                            if from == cur && blocked.insert(to.as_str()) {
                                stack.push(to);
                            }
                        }
                    }
                }
            }
        }
        let mut ready = BTreeSet::new();
        'next: for s in &subtasks {
            if completion[s] || blocked.contains(s.as_str()) {
                continue;
            }
            for p in self.predecessors(s) {
                let ok = match &self.nodes[p].kind {
                    NodeKind::SubTask => completion[p],
                    NodeKind::PreCondition { requires } => requires.eval_bool(streams).unwrap_or(false),
                    NodeKind::CapabilityConstraint { .. } | NodeKind::ContextCondition { .. } => true,
                };
                if !ok {
                    continue 'next;
                }
            }
            ready.insert(s.clone());
        }
        Ok(ready)
    }

    /// Returns a new graph with the overlay's nodes and edges added.
    pub fn apply_overlay(&self, overlay: &ContextOverlay) -> Result<TaskGraph, TaskError> {
        if overlay.target != self.task_id {
            return Err(TaskError::TargetMismatch {
                overlay: overlay.target.clone(),
                graph: self.task_id.clone(),
            });
        }
        let mut g = self.clone();
        for node in &overlay.nodes {
            if g.nodes.insert(node.id.clone(), node.clone()).is_some() {
                return Err(TaskError::DuplicateNode {
                    task: self.task_id.clone(),
                    node: node.id.clone(),
                });
            }
        }
        for (from, to) in &overlay.edges {
            if !g.edges.insert((from.clone(), to.clone())) {
                return Err(TaskError::DuplicateEdge {
                    task: self.task_id.clone(),
                    from: from.clone(),
                    to: to.clone(),
                });
            }
        }
        g.validate()?;
        Ok(g)
    }

    /// Inverse of [`TaskGraph::apply_overlay`].
    pub fn remove_overlay(&self, overlay: &ContextOverlay) -> Result<TaskGraph, TaskError> {
        if overlay.target != self.task_id {
            return Err(TaskError::TargetMismatch {
                overlay: overlay.target.clone(),
                graph: self.task_id.clone(),
            });
        }
        let mut g = self.clone();
        for (from, to) in &overlay.edges {
            if !g.edges.remove(&(from.clone(), to.clone())) {
                return Err(TaskError::OverlayNotApplied(format!("{from} -> {to}")));
            }
        }
        for node in &overlay.nodes {
            if g.nodes.remove(&node.id).is_none() {
                return Err(TaskError::OverlayNotApplied(node.id.clone()));
            }
        }
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn expr(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    /// Microphone input feeding keyword spotting, speech-to-text and a
    /// chatbot, with per-stage resource constraints.
    pub(crate) fn speech_description() -> TaskDescription {
        TaskDescription {
            id: "speech".into(),
            kind: KindName::Compound,
            rule: None,
            subtasks: vec!["keyword_spotting".into(), "speech_to_text".into(), "chatbot".into()],
            preconditions: vec![PreConditionSpec {
                id: "mic_input".into(),
                requires: expr("mic.level > 0"),
            }],
            constraints: vec![
                ConstraintSpec {
                    id: "kws_resources".into(),
                    cores: 1,
                    memory_mb: 100,
                },
                ConstraintSpec {
                    id: "stt_resources".into(),
                    cores: 4,
                    memory_mb: 300,
                },
            ],
            context: vec![],
            edges: vec![
                ("mic_input".into(), "keyword_spotting".into()),
                ("kws_resources".into(), "keyword_spotting".into()),
                ("keyword_spotting".into(), "speech_to_text".into()),
                ("stt_resources".into(), "speech_to_text".into()),
                ("speech_to_text".into(), "chatbot".into()),
            ],
        }
    }

    fn none_done(g: &TaskGraph) -> Completion {
        g.subtasks().into_iter().map(|s| (s, false)).collect()
    }

    fn moving_overlay(g: &TaskGraph) -> ContextOverlay {
        ContextOverlay::gate_task(g, "robot_not_moving", expr("norm(imu.accelerometer) > 0"), Some(0.0))
    }

    #[test]
    fn speech_graph_topology() {
        let g = TaskGraph::build(&speech_description()).unwrap();
        assert_eq!(g.subtasks().len(), 3);
        assert_eq!(g.root_subtasks(), vec!["keyword_spotting".to_string()]);
        assert_eq!(g.edges().count(), 5);
        assert_eq!(g.capability_demand(), (4, 400));
        assert_eq!(g.referenced_streams(), BTreeSet::from(["mic".to_string()]));
    }

    #[test]
    fn single_node_is_a_valid_elemental_task() {
        let d = TaskDescription {
            id: "beep".into(),
            kind: KindName::Elemental,
            rule: None,
            subtasks: vec!["beep".into()],
            preconditions: vec![],
            constraints: vec![],
            context: vec![],
            edges: vec![],
        };
        let g = TaskGraph::build(&d).unwrap();
        assert_eq!(g.kind, TaskKind::Elemental);
        let mut c = none_done(&g);
        assert!(!g.is_satisfied(&c).unwrap());
        c.insert("beep".into(), true);
        assert!(g.is_satisfied(&c).unwrap());
    }

    #[test]
    fn cycles_and_dangling_edges_are_rejected() {
        let mut d = speech_description();
        d.edges.push(("speech_to_text".into(), "keyword_spotting".into()));
        assert!(matches!(TaskGraph::build(&d), Err(TaskError::Cycle { .. })));

        let mut d = speech_description();
        d.edges.push(("ghost".into(), "chatbot".into()));
        assert!(matches!(TaskGraph::build(&d), Err(TaskError::DanglingEdge { .. })));

        let mut d = speech_description();
        d.edges.retain(|(from, _)| from != "stt_resources");
        assert!(matches!(TaskGraph::build(&d), Err(TaskError::UnattachedConstraint { .. })));

        let mut d = speech_description();
        d.constraints[0].cores = 0;
        assert!(matches!(TaskGraph::build(&d), Err(TaskError::InvalidConstraint { .. })));
    }

    #[test]
    fn compound_needs_every_subtask() {
        let g = TaskGraph::build(&speech_description()).unwrap();
        let mut c = none_done(&g);
        c.insert("keyword_spotting".into(), true);
        c.insert("speech_to_text".into(), true);
        assert!(!g.is_satisfied(&c).unwrap());
        c.insert("chatbot".into(), true);
        assert!(g.is_satisfied(&c).unwrap());
        c.remove("chatbot");
        assert_eq!(g.is_satisfied(&c), Err(TaskError::MissingSubtask("chatbot".into())));
    }

    #[test]
    fn complex_two_of_three_matches_enumeration() {
        let d = TaskDescription {
            id: "patrol".into(),
            kind: KindName::Complex,
            rule: Some(Rule::parse("at_least(2, a, b, c)").unwrap()),
            subtasks: vec!["a".into(), "b".into(), "c".into()],
            preconditions: vec![],
            constraints: vec![],
            context: vec![],
            edges: vec![],
        };
        let g = TaskGraph::build(&d).unwrap();
        // All 8 completion states, enumerated by hand: true iff >= 2 done.
        let expected = [false, false, false, true, false, true, true, true];
        for (mask, want) in expected.iter().enumerate() {
            let c: Completion = ["a", "b", "c"]
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), mask & (1 << i) != 0))
                .collect();
            assert_eq!(g.is_satisfied(&c).unwrap(), *want, "mask {mask:03b}");
        }
    }

    #[test]
    fn rule_grammar_round_trips() {
        for src in ["a", "all(a, b)", "any(a, all(b, c))", "at_least(2, a, b, c)"] {
            let r = Rule::parse(src).unwrap();
            assert_eq!(r.to_string(), src);
            assert_eq!(Rule::parse(&r.to_string()).unwrap(), r);
        }
        for bad in ["", "all(", "at_least(x, a)", "nope(a)", "all(a b)", "a)"] {
            assert!(Rule::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn keyword_spotting_waits_for_speech_input() {
        let g = TaskGraph::build(&speech_description()).unwrap();
        let c = none_done(&g);
        let mut s = StreamState::new();
        s.set("mic", None);
        assert!(g.ready_subtasks(&s, &c).unwrap().is_empty());
        s.set("mic", Some(json!({"level": 0.8})));
        assert_eq!(
            g.ready_subtasks(&s, &c).unwrap(),
            BTreeSet::from(["keyword_spotting".to_string()])
        );
        assert_eq!(
            g.ready_subtasks(&StreamState::new(), &c),
            Err(TaskError::UnreferencedStream("mic".into()))
        );
    }

    #[test]
    fn vacuous_conditions_make_all_roots_ready() {
        let d = TaskDescription {
            id: "t".into(),
            kind: KindName::Compound,
            rule: None,
            subtasks: vec!["a".into(), "b".into(), "c".into()],
            preconditions: vec![],
            constraints: vec![],
            context: vec![],
            edges: vec![("a".into(), "c".into())],
        };
        let g = TaskGraph::build(&d).unwrap();
        let ready = g.ready_subtasks(&StreamState::new(), &none_done(&g)).unwrap();
        assert_eq!(ready, BTreeSet::from(["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn moving_robot_blocks_the_speech_subtree() {
        let g = TaskGraph::build(&speech_description()).unwrap();
        let gated = g.apply_overlay(&moving_overlay(&g)).unwrap();
        let mut s = StreamState::new();
        s.set("mic", Some(json!({"level": 1.0})));
        s.set("imu", Some(json!({"accelerometer": [0.2, 0.0, 0.1]})));
        let mut c = none_done(&gated);
        assert!(gated.ready_subtasks(&s, &c).unwrap().is_empty());
        // Even with earlier stages finished, nothing downstream may run.
        c.insert("keyword_spotting".into(), true);
        assert!(gated.ready_subtasks(&s, &c).unwrap().is_empty());
        s.set("imu", Some(json!({"accelerometer": [0.0, 0.0, 0.0]})));
        assert_eq!(
            gated.ready_subtasks(&s, &c).unwrap(),
            BTreeSet::from(["speech_to_text".to_string()])
        );
    }

    #[test]
    fn overlay_round_trip_and_identity() {
        let g = TaskGraph::build(&speech_description()).unwrap();
        let o = moving_overlay(&g);
        let gated = g.apply_overlay(&o).unwrap();
        assert_ne!(gated, g);
        assert_eq!(gated.remove_overlay(&o).unwrap(), g);
        assert_eq!(g.apply_overlay(&ContextOverlay::empty("speech")).unwrap(), g);
        assert!(matches!(
            g.apply_overlay(&ContextOverlay::empty("other")),
            Err(TaskError::TargetMismatch { .. })
        ));
        assert!(matches!(gated.apply_overlay(&o), Err(TaskError::DuplicateNode { .. })));
        assert!(matches!(g.remove_overlay(&o), Err(TaskError::OverlayNotApplied(_))));
    }

    #[test]
    fn description_parses_from_toml() {
        let src = r#"
            id = "speech"
            kind = "complex"
            rule = "any(kws, stt)"
            subtasks = ["kws", "stt"]
            edges = [["mic_input", "kws"], ["kws", "stt"]]
            [[preconditions]]
            id = "mic_input"
            requires = "mic.level > 0"
        "#;
        let d: TaskDescription = toml::from_str(src).unwrap();
        let g = TaskGraph::build(&d).unwrap();
        assert_eq!(g.kind, TaskKind::Complex(Rule::Any(vec![Rule::Done("kws".into()), Rule::Done("stt".into())])));
        let back: TaskDescription = toml::from_str(&toml::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
