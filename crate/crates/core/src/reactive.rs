//! A minimal, synchronous reactive-streams engine.
//!
//! All streams live in a [`Dispatcher`]. Source streams (external inputs and
//! pub-sub topics) accept [`Dispatcher::emit`]; derived streams are built from
//! existing ones with [`Dispatcher::filter`], [`Dispatcher::map`] and
//! [`Dispatcher::combine_latest`]. An emission is propagated depth-first to
//! subscribers and derived streams in registration order before `emit`
//! returns, so the same emission sequence always produces the same derived
//! output.
//!
//! Producers on other threads hand events over through an [`EventSender`];
//! they are applied in arrival order by [`Dispatcher::drain`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};
use serde_json::Value;
use thiserror::Error;

use crate::expr::{Env, EvalError};

/// Virtual time in microseconds.
pub type Micros = u64;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(String);

impl StreamId {
    pub fn new(id: impl Into<String>) -> Self {
        StreamId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StreamId {
    fn from(s: &str) -> Self {
        StreamId(s.to_string())
    }
}

impl From<String> for StreamId {
    fn from(s: String) -> Self {
        StreamId(s)
    }
}

/// One value on one stream. The payload is shared, never mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub stream: StreamId,
    pub timestamp: Micros,
    pub payload: Arc<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceDescriptor {
    /// A sensor or other external input registered under the given name.
    Input(String),
    /// A pub-sub topic; `id` is the stream id the wrapper registers under.
    Topic { topic: String, id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamSource {
    ExternalInput,
    Topic(String),
    Operator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Filter,
    Map,
    CombineLatest,
}

/// Read-only description of a registered stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservableStream {
    pub id: StreamId,
    pub source: StreamSource,
    /// Stages from the nearest source down to this stream.
    pub operator_chain: Vec<StageKind>,
    pub parents: Vec<StreamId>,
}

/// A filter predicate or map transform that could not handle a payload.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct StageError(pub String);

impl From<EvalError> for StageError {
    fn from(e: EvalError) -> Self {
        StageError(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("stream `{0}` is already registered")]
    Duplicate(StreamId),
    #[error("unknown stream `{0}`")]
    UnknownStream(StreamId),
    #[error("combine_latest needs at least one input stream")]
    EmptyCombine,
    #[error("stream `{0}` is derived and cannot be emitted into")]
    NotEmittable(StreamId),
    #[error("timestamp {got} on `{stream}` is earlier than the previous {last}")]
    TimestampRegression { stream: StreamId, last: Micros, got: Micros },
    #[error("unknown subscription {0:?}")]
    UnknownSubscription(SubscriptionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    pub emitted: u64,
    /// Events a failing predicate or transform refused to process.
    pub dropped: u64,
}

type Predicate = Box<dyn Fn(&Value) -> Result<bool, StageError>>;
type Transform = Box<dyn Fn(&Value) -> Result<Value, StageError>>;
type Callback = Box<dyn FnMut(&Event)>;

enum Stage {
    Source,
    Filter(Predicate),
    Map(Transform),
    /// Latest value per input and the newest input timestamp seen.
    Combine(Vec<Option<Arc<Value>>>, Micros),
}

impl Stage {
    fn kind(&self) -> Option<StageKind> {
        match self {
            Stage::Source => None,
            Stage::Filter(_) => Some(StageKind::Filter),
            Stage::Map(_) => Some(StageKind::Map),
            Stage::Combine(..) => Some(StageKind::CombineLatest),
        }
    }
}

#[derive(Clone, Copy)]
enum Listener {
    /// Derived stream `node`, fed as its `input`-th parent.
    Child { node: usize, input: usize },
    Subscriber(SubscriptionId),
}

struct Node {
    id: StreamId,
    source: StreamSource,
    parents: Vec<usize>,
    stage: Stage,
    listeners: Vec<Listener>,
    last_ts: Option<Micros>,
    latest: Option<Arc<Value>>,
    stats: StreamStats,
}

struct SubEntry {
    node: usize,
    callback: Option<Callback>,
}

/// Hands emissions to a [`Dispatcher`] from any thread.
#[derive(Clone)]
pub struct EventSender {
    tx: Sender<(StreamId, Value, Micros)>,
}

impl EventSender {
    /// Queues an emission. Returns `false` once the dispatcher is gone.
    pub fn send(&self, stream: impl Into<StreamId>, payload: Value, timestamp: Micros) -> bool {
        self.tx.send((stream.into(), payload, timestamp)).is_ok()
    }
}

/// Events collected by [`Dispatcher::collect`].
pub type Collected = Rc<RefCell<Vec<Event>>>;

/// Owner of every stream; serializes all emissions.
pub struct Dispatcher {
    nodes: Vec<Node>,
    index: HashMap<StreamId, usize>,
    subs: HashMap<SubscriptionId, SubEntry>,
    next_sub: u64,
    next_auto: u64,
    tx: Sender<(StreamId, Value, Micros)>,
    rx: Receiver<(StreamId, Value, Micros)>,
}

impl Default for Dispatcher {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Dispatcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Dispatcher")
            .field("streams", &self.nodes.iter().map(|n| n.id.as_str()).collect::<Vec<_>>())
            .field("subscriptions", &self.subs.len())
            .finish()
    }
}

impl Dispatcher {
    pub fn new() -> Self {
        let (tx, rx) = crossbeam_channel::unbounded();
        Dispatcher {
            nodes: Vec::new(),
            index: HashMap::new(),
            subs: HashMap::new(),
            next_sub: 0,
            next_auto: 0,
            tx,
            rx,
        }
    }

    fn lookup(&self, id: &StreamId) -> Result<usize, StreamError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| StreamError::UnknownStream(id.clone()))
    }

    fn insert(&mut self, id: StreamId, source: StreamSource, parents: Vec<usize>, stage: Stage) -> Result<StreamId, StreamError> {
        if self.index.contains_key(&id) {
            return Err(StreamError::Duplicate(id));
        }
        let idx = self.nodes.len();
        // Parents always precede the new node, so the graph stays acyclic.
        debug_assert!(parents.iter().all(|&p| p < idx));
        for (input, &p) in parents.iter().enumerate() {
            self.nodes[p].listeners.push(Listener::Child { node: idx, input });
        }
        self.nodes.push(Node {
            id: id.clone(),
            source,
            parents,
            stage,
            listeners: Vec::new(),
            last_ts: None,
            latest: None,
            stats: StreamStats::default(),
        });
        self.index.insert(id.clone(), idx);
        Ok(id)
    }

    fn auto_id(&mut self, op: &str, parent: &StreamId) -> StreamId {
        self.next_auto += 1;
        StreamId(format!("{parent}|{op}#{}", self.next_auto))
    }

    /// Registers a source stream with an empty operator chain.
    pub fn create_stream(&mut self, source: SourceDescriptor) -> Result<StreamId, StreamError> {
        match source {
            SourceDescriptor::Input(name) => self.insert(StreamId(name), StreamSource::ExternalInput, vec![], Stage::Source),
            SourceDescriptor::Topic { topic, id } => self.insert(StreamId(id), StreamSource::Topic(topic), vec![], Stage::Source),
        }
    }

    pub fn filter(
        &mut self,
        parent: &StreamId,
        predicate: impl Fn(&Value) -> Result<bool, StageError> + 'static,
    ) -> Result<StreamId, StreamError> {
        let id = self.auto_id("filter", parent);
        self.filter_as(id, parent, predicate)
    }

    pub fn filter_as(
        &mut self,
        id: impl Into<StreamId>,
        parent: &StreamId,
        predicate: impl Fn(&Value) -> Result<bool, StageError> + 'static,
    ) -> Result<StreamId, StreamError> {
        let p = self.lookup(parent)?;
        self.insert(id.into(), StreamSource::Operator, vec![p], Stage::Filter(Box::new(predicate)))
    }

    pub fn map(
        &mut self,
        parent: &StreamId,
        transform: impl Fn(&Value) -> Result<Value, StageError> + 'static,
    ) -> Result<StreamId, StreamError> {
        let id = self.auto_id("map", parent);
        self.map_as(id, parent, transform)
    }

    pub fn map_as(
        &mut self,
        id: impl Into<StreamId>,
        parent: &StreamId,
        transform: impl Fn(&Value) -> Result<Value, StageError> + 'static,
    ) -> Result<StreamId, StreamError> {
        let p = self.lookup(parent)?;
        self.insert(id.into(), StreamSource::Operator, vec![p], Stage::Map(Box::new(transform)))
    }

    /// Emits a JSON array holding the latest value of each input, once every
    /// input has emitted at least once and then on every input event.
    pub fn combine_latest(&mut self, parents: &[StreamId]) -> Result<StreamId, StreamError> {
        let first = parents.first().ok_or(StreamError::EmptyCombine)?.clone();
        let id = self.auto_id("combine", &first);
        self.combine_latest_as(id, parents)
    }

    pub fn combine_latest_as(&mut self, id: impl Into<StreamId>, parents: &[StreamId]) -> Result<StreamId, StreamError> {
        if parents.is_empty() {
            return Err(StreamError::EmptyCombine);
        }
        let idxs = parents.iter().map(|p| self.lookup(p)).collect::<Result<Vec<_>, _>>()?;
        let n = idxs.len();
        self.insert(id.into(), StreamSource::Operator, idxs, Stage::Combine(vec![None; n], 0))
    }

    pub fn subscribe(&mut self, stream: &StreamId, callback: impl FnMut(&Event) + 'static) -> Result<SubscriptionId, StreamError> {
        let node = self.lookup(stream)?;
        self.next_sub += 1;
        let id = SubscriptionId(self.next_sub);
        self.subs.insert(
            id,
            SubEntry {
                node,
                callback: Some(Box::new(callback)),
            },
        );
        self.nodes[node].listeners.push(Listener::Subscriber(id));
        Ok(id)
    }

    /// Subscribes a buffer that records every subsequent event on `stream`.
    pub fn collect(&mut self, stream: &StreamId) -> Result<Collected, StreamError> {
        let buf: Collected = Rc::default();
        let sink = Rc::clone(&buf);
        self.subscribe(stream, move |e| sink.borrow_mut().push(e.clone()))?;
        Ok(buf)
    }

    /// After this returns the callback is dropped and sees nothing more.
    pub fn unsubscribe(&mut self, id: SubscriptionId) -> Result<(), StreamError> {
        let entry = self.subs.remove(&id).ok_or(StreamError::UnknownSubscription(id))?;
        self.nodes[entry.node]
            .listeners
            .retain(|l| !matches!(l, Listener::Subscriber(s) if *s == id));
        Ok(())
    }

    pub fn is_active(&self, id: SubscriptionId) -> bool {
        self.subs.contains_key(&id)
    }

    pub fn emit(&mut self, stream: &StreamId, payload: Value, timestamp: Micros) -> Result<(), StreamError> {
        let idx = self.lookup(stream)?;
        let node = &self.nodes[idx];
        if node.source == StreamSource::Operator {
            return Err(StreamError::NotEmittable(stream.clone()));
        }
        if let Some(last) = node.last_ts {
            if timestamp < last {
                return Err(StreamError::TimestampRegression {
                    stream: stream.clone(),
                    last,
                    got: timestamp,
                });
            }
        }
        self.deliver(idx, Arc::new(payload), timestamp);
        Ok(())
    }

    pub fn sender(&self) -> EventSender {
        EventSender { tx: self.tx.clone() }
    }

    /// Applies every queued cross-thread emission in arrival order. Stops at
    /// the first rejected emission, which is returned.
    pub fn drain(&mut self) -> Result<usize, StreamError> {
        let mut n = 0;
        while let Ok((stream, payload, ts)) = self.rx.try_recv() {
            self.emit(&stream, payload, ts)?;
            n += 1;
        }
        Ok(n)
    }

    fn deliver(&mut self, idx: usize, payload: Arc<Value>, ts: Micros) {
        let node = &mut self.nodes[idx];
        node.last_ts = Some(ts);
        node.latest = Some(Arc::clone(&payload));
        node.stats.emitted += 1;
        let event = Event {
            stream: node.id.clone(),
            timestamp: ts,
            payload,
        };
        let listeners = node.listeners.clone();
        for listener in listeners {
            match listener {
                Listener::Subscriber(sub) => {
                    // Taken out for the call so the callback can't alias `self`.
                    let Some(mut cb) = self.subs.get_mut(&sub).and_then(|e| e.callback.take()) else {
                        continue;
                    };
                    cb(&event);
                    if let Some(entry) = self.subs.get_mut(&sub) {
                        entry.callback = Some(cb);
                    }
                }
                Listener::Child { node: child, input } => {
                    if let Some((out, out_ts)) = self.step(child, input, &event) {
                        self.deliver(child, out, out_ts);
                    }
                }
            }
        }
    }

    fn step(&mut self, idx: usize, input: usize, event: &Event) -> Option<(Arc<Value>, Micros)> {
        let node = &mut self.nodes[idx];
        match &mut node.stage {
            Stage::Source => None,
            Stage::Filter(pred) => match pred(&event.payload) {
                Ok(true) => Some((Arc::clone(&event.payload), event.timestamp)),
                Ok(false) => None,
                Err(e) => {
                    log::debug!("filter on `{}` dropped an event: {e}", node.id);
                    node.stats.dropped += 1;
                    None
                }
            },
            Stage::Map(f) => match f(&event.payload) {
                Ok(v) => Some((Arc::new(v), event.timestamp)),
                Err(e) => {
                    log::debug!("map on `{}` dropped an event: {e}", node.id);
                    node.stats.dropped += 1;
                    None
                }
            },
            Stage::Combine(latest, newest) => {
                latest[input] = Some(Arc::clone(&event.payload));
                *newest = (*newest).max(event.timestamp);
                if latest.iter().any(Option::is_none) {
                    return None;
                }
                let tuple = Value::Array(latest.iter().flatten().map(|v| (**v).clone()).collect());
                Some((Arc::new(tuple), *newest))
            }
        }
    }

    pub fn contains(&self, id: &StreamId) -> bool {
        self.index.contains_key(id)
    }

    pub fn latest(&self, id: &StreamId) -> Option<&Value> {
        self.index.get(id).and_then(|&i| self.nodes[i].latest.as_deref())
    }

    pub fn stats(&self, id: &StreamId) -> Option<StreamStats> {
        self.index.get(id).map(|&i| self.nodes[i].stats)
    }

    pub fn describe(&self, id: &StreamId) -> Option<ObservableStream> {
        let &idx = self.index.get(id)?;
        let node = &self.nodes[idx];
        let mut chain = Vec::new();
        let mut cur = idx;
        while let Some(kind) = self.nodes[cur].stage.kind() {
            chain.push(kind);
            // Follow the first parent; combine stages start a new chain.
            if kind == StageKind::CombineLatest {
                break;
            }
            cur = self.nodes[cur].parents[0];
        }
        chain.reverse();
        Some(ObservableStream {
            id: node.id.clone(),
            source: node.source.clone(),
            operator_chain: chain,
            parents: node.parents.iter().map(|&p| self.nodes[p].id.clone()).collect(),
        })
    }

    pub fn stream_ids(&self) -> impl Iterator<Item = &StreamId> {
        self.nodes.iter().map(|n| &n.id)
    }

    /// Verifies the dependency graph has no cycle.
    pub fn is_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indegree: Vec<usize> = self.nodes.iter().map(|node| node.parents.len()).collect();
        let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for l in &self.nodes[i].listeners {
                if let Listener::Child { node, .. } = *l {
                    indegree[node] -= 1;
                    if indegree[node] == 0 {
                        ready.push(node);
                    }
                }
            }
        }
        seen == n
    }
}

impl Env for Dispatcher {
    fn lookup(&self, stream: &str) -> Option<&Value> {
        self.latest(&StreamId::new(stream))
    }
}
