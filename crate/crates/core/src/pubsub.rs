//! In-process publish-subscribe between modules.
//!
//! A message body is serialized once into an immutable [`PayloadHandle`] and
//! every subscriber receives a handle to the same buffer. Topics can be wrapped
//! as reactive streams with [`topic_as_stream`] so that a module's output can
//! drive the controller.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, ThreadId};

use crossbeam_channel::{Receiver, Sender};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::reactive::{Dispatcher, Micros, SourceDescriptor, StreamError, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schema {
    /// Payload bytes must be a JSON document.
    Json,
    /// Opaque bytes.
    Binary,
}

/// Shared, immutable message body.
#[derive(Clone, PartialEq, Eq)]
pub struct PayloadHandle(Arc<[u8]>);

impl PayloadHandle {
    pub fn bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when both handles point at the same buffer.
    pub fn same_buffer(&self, other: &PayloadHandle) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl fmt::Debug for PayloadHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PayloadHandle({} bytes)", self.0.len())
    }
}

impl From<Vec<u8>> for PayloadHandle {
    fn from(v: Vec<u8>) -> Self {
        PayloadHandle(v.into())
    }
}

impl From<&[u8]> for PayloadHandle {
    fn from(v: &[u8]) -> Self {
        PayloadHandle(v.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublisherId(u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: Arc<str>,
    pub publisher: PublisherId,
    /// Strictly increasing per (topic, publisher), starting at 1.
    pub seq: u64,
    pub timestamp: Micros,
    pub payload: PayloadHandle,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("topic `{0}` already exists")]
    DuplicateTopic(String),
    #[error("payload does not match the {schema:?} schema of `{topic}`")]
    SchemaMismatch { topic: String, schema: Schema },
    #[error("re-entrant publish to `{0}` from one of its own subscribers")]
    Reentrant(String),
    #[error("could not serialize payload: {0}")]
    Serialize(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BusStats {
    pub published: u64,
    pub delivered: u64,
    pub serializations: u64,
    /// Deepest subscriber queue seen at publish time.
    pub max_queue_depth: usize,
}

type SharedCallback = Arc<Mutex<dyn FnMut(&Message) + Send>>;

#[derive(Clone)]
enum Sink {
    Queue(Sender<Message>),
    Callback(SharedCallback),
}

struct TopicInner {
    subscribers: Vec<(u64, Sink)>,
    seqs: HashMap<PublisherId, u64>,
}

struct Topic {
    name: Arc<str>,
    schema: Schema,
    inner: Mutex<TopicInner>,
    delivery: Mutex<()>,
    delivering: Mutex<Option<ThreadId>>,
}

#[derive(Default)]
struct Counters {
    published: AtomicU64,
    delivered: AtomicU64,
    serializations: AtomicU64,
    max_depth: AtomicU64,
}

struct BusInner {
    topics: Mutex<HashMap<String, Arc<Topic>>>,
    next_id: AtomicU64,
    counters: Counters,
}

fn lock<T: ?Sized>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Cheaply cloneable handle to one message bus.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<BusInner>,
    default_publisher: PublisherId,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bus").field("topics", &self.topics()).finish()
    }
}

impl Bus {
    pub fn new() -> Self {
        let inner = Arc::new(BusInner {
            topics: Mutex::default(),
            next_id: AtomicU64::new(1),
            counters: Counters::default(),
        });
        Bus {
            inner,
            default_publisher: PublisherId(0),
        }
    }

    pub fn create_topic(&self, name: &str, schema: Schema) -> Result<(), BusError> {
        let mut topics = lock(&self.inner.topics);
        if topics.contains_key(name) {
            return Err(BusError::DuplicateTopic(name.into()));
        }
        topics.insert(
            name.into(),
            Arc::new(Topic {
                name: name.into(),
                schema,
                inner: Mutex::new(TopicInner {
                    subscribers: Vec::new(),
                    seqs: HashMap::new(),
                }),
                delivery: Mutex::new(()),
                delivering: Mutex::new(None),
            }),
        );
        Ok(())
    }

    pub fn topics(&self) -> Vec<String> {
        let mut names: Vec<_> = lock(&self.inner.topics).keys().cloned().collect();
        names.sort();
        names
    }

    pub fn schema(&self, topic: &str) -> Option<Schema> {
        lock(&self.inner.topics).get(topic).map(|t| t.schema)
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, BusError> {
        lock(&self.inner.topics)
            .get(name)
            .cloned()
            .ok_or_else(|| BusError::UnknownTopic(name.into()))
    }

    fn next_id(&self) -> u64 {
        self.inner.next_id.fetch_add(1, Ordering::Relaxed)
    }

    /// A handle that publishes under its own sequence counters.
    pub fn publisher(&self) -> Publisher {
        Publisher {
            bus: self.clone(),
            id: PublisherId(self.next_id()),
        }
    }

    /// Publishes as the bus's default publisher.
    pub fn publish(&self, topic: &str, payload: impl Into<PayloadHandle>, timestamp: Micros) -> Result<Message, BusError> {
        self.publish_as(self.default_publisher, topic, payload.into(), timestamp)
    }

    /// Serializes `value` once and publishes the resulting buffer.
    pub fn publish_json<T: Serialize>(&self, topic: &str, value: &T, timestamp: Micros) -> Result<Message, BusError> {
        self.topic(topic)?;
        let bytes = serde_json::to_vec(value).map_err(|e| BusError::Serialize(e.to_string()))?;
        self.inner.counters.serializations.fetch_add(1, Ordering::Relaxed);
        self.publish(topic, bytes, timestamp)
    }

    fn publish_as(&self, publisher: PublisherId, name: &str, payload: PayloadHandle, timestamp: Micros) -> Result<Message, BusError> {
        let topic = self.topic(name)?;
        if topic.schema == Schema::Json && serde_json::from_slice::<serde::de::IgnoredAny>(payload.bytes()).is_err() {
            return Err(BusError::SchemaMismatch {
                topic: name.into(),
                schema: topic.schema,
            });
        }
        let me = thread::current().id();
        if *lock(&topic.delivering) == Some(me) {
            return Err(BusError::Reentrant(name.into()));
        }
        let _serial = lock(&topic.delivery);
        *lock(&topic.delivering) = Some(me);

        let (message, sinks) = {
            let mut inner = lock(&topic.inner);
            let seq = inner.seqs.entry(publisher).or_insert(0);
            *seq += 1;
            let message = Message {
                topic: Arc::clone(&topic.name),
                publisher,
                seq: *seq,
                timestamp,
                payload,
            };
            let sinks: Vec<Sink> = inner.subscribers.iter().map(|(_, s)| s.clone()).collect();
            (message, sinks)
        };

        let counters = &self.inner.counters;
        counters.published.fetch_add(1, Ordering::Relaxed);
        for sink in sinks {
            match sink {
                Sink::Queue(tx) => {
                    if tx.send(message.clone()).is_ok() {
                        counters.delivered.fetch_add(1, Ordering::Relaxed);
                        counters.max_depth.fetch_max(tx.len() as u64, Ordering::Relaxed);
                    }
                }
                Sink::Callback(cb) => {
                    (lock(&cb))(&message);
                    counters.delivered.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        *lock(&topic.delivering) = None;
        Ok(message)
    }

    /// Receives every message published on `topic` from now on.
    pub fn subscribe(&self, topic: &str) -> Result<Subscription, BusError> {
        let t = self.topic(topic)?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let id = self.next_id();
        lock(&t.inner).subscribers.push((id, Sink::Queue(tx)));
        Ok(Subscription {
            bus: self.clone(),
            topic: topic.into(),
            id,
            rx,
            active: true,
        })
    }

    /// Runs `callback` synchronously inside each publish. The callback must not
    /// publish to the same topic; such a publish fails with
    /// [`BusError::Reentrant`].
    pub fn subscribe_with(&self, topic: &str, callback: impl FnMut(&Message) + Send + 'static) -> Result<CallbackSubscription, BusError> {
        let t = self.topic(topic)?;
        let id = self.next_id();
        lock(&t.inner)
            .subscribers
            .push((id, Sink::Callback(Arc::new(Mutex::new(callback)))));
        Ok(CallbackSubscription {
            bus: self.clone(),
            topic: topic.into(),
            id,
        })
    }

    fn remove_subscriber(&self, topic: &str, id: u64) {
        if let Ok(t) = self.topic(topic) {
            lock(&t.inner).subscribers.retain(|(sid, _)| *sid != id);
        }
    }

    pub fn stats(&self) -> BusStats {
        let c = &self.inner.counters;
        BusStats {
            published: c.published.load(Ordering::Relaxed),
            delivered: c.delivered.load(Ordering::Relaxed),
            serializations: c.serializations.load(Ordering::Relaxed),
            max_queue_depth: c.max_depth.load(Ordering::Relaxed) as usize,
        }
    }
}

pub struct Publisher {
    bus: Bus,
    id: PublisherId,
}

impl Publisher {
    pub fn id(&self) -> PublisherId {
        self.id
    }

    pub fn publish(&self, topic: &str, payload: impl Into<PayloadHandle>, timestamp: Micros) -> Result<Message, BusError> {
        self.bus.publish_as(self.id, topic, payload.into(), timestamp)
    }
}

/// Queue-backed subscription. Iterating yields the messages received so far
/// without blocking.
pub struct Subscription {
    bus: Bus,
    topic: String,
    id: u64,
    rx: Receiver<Message>,
    active: bool,
}

impl Subscription {
    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn try_next(&self) -> Option<Message> {
        self.rx.try_recv().ok()
    }

    pub fn recv_timeout(&self, timeout: std::time::Duration) -> Option<Message> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn pending(&self) -> usize {
        self.rx.len()
    }

    /// Stops delivery and discards anything still queued.
    pub fn unsubscribe(&mut self) {
        if self.active {
            self.bus.remove_subscriber(&self.topic, self.id);
            self.active = false;
            while self.rx.try_recv().is_ok() {}
        }
    }
}

impl Iterator for Subscription {
    type Item = Message;

    fn next(&mut self) -> Option<Message> {
        self.try_next()
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.unsubscribe();
    }
}

pub struct CallbackSubscription {
    bus: Bus,
    topic: String,
    id: u64,
}

impl Drop for CallbackSubscription {
    fn drop(&mut self) {
        self.bus.remove_subscriber(&self.topic, self.id);
    }
}

/// A topic subscription feeding a source stream in a [`Dispatcher`].
///
/// Nothing reaches the dispatcher until [`TopicStream::pump`] is called.
pub struct TopicStream {
    subscription: Subscription,
    schema: Schema,
    stream: StreamId,
}

impl TopicStream {
    pub fn stream_id(&self) -> &StreamId {
        &self.stream
    }

    /// Emits every queued message, in order, into the wrapped stream. JSON
    /// topics emit the decoded document; binary topics emit
    /// `{"len": .., "seq": ..}`.
    pub fn pump(&mut self, dispatcher: &mut Dispatcher) -> Result<usize, BusError> {
        let mut n = 0;
        while let Some(msg) = self.subscription.try_next() {
            let payload = match self.schema {
                Schema::Json => serde_json::from_slice(msg.payload.bytes()).unwrap_or(Value::Null),
                Schema::Binary => json!({"len": msg.payload.len(), "seq": msg.seq}),
            };
            dispatcher.emit(&self.stream, payload, msg.timestamp)?;
            n += 1;
        }
        Ok(n)
    }
}

/// Wraps `topic` as a stream named after the topic, or `topic#k` when that
/// id is taken by an earlier wrapper.
pub fn topic_as_stream(bus: &Bus, dispatcher: &mut Dispatcher, topic: &str) -> Result<TopicStream, BusError> {
    let mut id = topic.to_string();
    let mut k = 1;
    while dispatcher.contains(&StreamId::new(&id)) {
        id = format!("{topic}#{k}");
        k += 1;
    }
    topic_as_stream_named(bus, dispatcher, topic, &id)
}

pub fn topic_as_stream_named(bus: &Bus, dispatcher: &mut Dispatcher, topic: &str, id: &str) -> Result<TopicStream, BusError> {
    let schema = bus.schema(topic).ok_or_else(|| BusError::UnknownTopic(topic.into()))?;
    let stream = dispatcher.create_stream(SourceDescriptor::Topic {
        topic: topic.into(),
        id: id.into(),
    })?;
    let subscription = bus.subscribe(topic)?;
    Ok(TopicStream {
        subscription,
        schema,
        stream,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bus_with(topic: &str, schema: Schema) -> Bus {
        let bus = Bus::new();
        bus.create_topic(topic, schema).unwrap();
        bus
    }

    #[test]
    fn fan_out_shares_one_buffer() {
        let bus = bus_with("slam/pose", Schema::Json);
        let subs: Vec<_> = (0..3).map(|_| bus.subscribe("slam/pose").unwrap()).collect();
        let sent = bus.publish_json("slam/pose", &json!({"x": 1.0, "y": 2.0}), 5).unwrap();
        let got: Vec<Message> = subs.iter().map(|s| s.try_next().unwrap()).collect();
        for m in &got {
            assert!(m.payload.same_buffer(&sent.payload));
            assert_eq!(m.payload.bytes(), sent.payload.bytes());
        }
        assert_eq!(bus.stats().serializations, 1);
        assert_eq!(bus.stats().delivered, 3);
    }

    #[test]
    fn unknown_topic_and_schema_errors() {
        let bus = bus_with("a", Schema::Json);
        assert_eq!(bus.publish("nope", vec![1], 0).unwrap_err(), BusError::UnknownTopic("nope".into()));
        assert!(matches!(bus.subscribe("nope"), Err(BusError::UnknownTopic(_))));
        assert!(matches!(bus.publish("a", b"not json".to_vec(), 0), Err(BusError::SchemaMismatch { .. })));
        assert_eq!(bus.create_topic("a", Schema::Binary), Err(BusError::DuplicateTopic("a".into())));
    }

    #[test]
    fn late_subscriber_misses_history() {
        let bus = bus_with("t", Schema::Binary);
        bus.publish("t", vec![1], 0).unwrap();
        let mut sub = bus.subscribe("t").unwrap();
        bus.publish("t", vec![2], 1).unwrap();
        let got: Vec<_> = sub.by_ref().map(|m| m.payload.bytes().to_vec()).collect();
        assert_eq!(got, vec![vec![2]]);
    }

    #[test]
    fn per_publisher_sequences() {
        let bus = bus_with("t", Schema::Binary);
        let sub = bus.subscribe("t").unwrap();
        let (p1, p2) = (bus.publisher(), bus.publisher());
        for i in 0..3u8 {
            p1.publish("t", vec![i], 0).unwrap();
            p2.publish("t", vec![i], 0).unwrap();
        }
        let msgs: Vec<_> = sub.collect();
        for p in [p1.id(), p2.id()] {
            let seqs: Vec<_> = msgs.iter().filter(|m| m.publisher == p).map(|m| m.seq).collect();
            assert_eq!(seqs, vec![1, 2, 3]);
        }
    }

    #[test]
    fn unsubscribe_stops_delivery() {
        let bus = bus_with("t", Schema::Binary);
        let mut sub = bus.subscribe("t").unwrap();
        sub.unsubscribe();
        bus.publish("t", vec![1], 0).unwrap();
        assert!(sub.try_next().is_none());
        assert_eq!(bus.stats().delivered, 0);
    }

    #[test]
    fn reentrant_publish_is_rejected() {
        let bus = bus_with("t", Schema::Binary);
        bus.create_topic("other", Schema::Binary).unwrap();
        let inner = bus.clone();
        let results = Arc::new(Mutex::new(Vec::new()));
        let r = Arc::clone(&results);
        let _cb = bus
            .subscribe_with("t", move |m| {
                if m.seq == 1 {
                    r.lock().unwrap().push(inner.publish("t", vec![9], 0).map(|_| ()));
                    r.lock().unwrap().push(inner.publish("other", vec![9], 0).map(|_| ()));
                }
            })
            .unwrap();
        bus.publish("t", vec![1], 0).unwrap();
        let results = results.lock().unwrap();
        assert_eq!(results[0], Err(BusError::Reentrant("t".into())));
        assert_eq!(results[1], Ok(()));
        // The topic is usable again once delivery finished.
        bus.publish("t", vec![2], 0).unwrap();
    }

    #[test]
    fn publish_from_many_threads_keeps_per_publisher_order() {
        let bus = bus_with("t", Schema::Binary);
        let sub = bus.subscribe("t").unwrap();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let p = bus.publisher();
                thread::spawn(move || {
                    for i in 0..50u8 {
                        p.publish("t", vec![i], 0).unwrap();
                    }
                    p.id()
                })
            })
            .collect();
        let ids: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let msgs: Vec<_> = sub.collect();
        assert_eq!(msgs.len(), 200);
        for id in ids {
            let seqs: Vec<_> = msgs.iter().filter(|m| m.publisher == id).map(|m| m.seq).collect();
            assert_eq!(seqs, (1..=50).collect::<Vec<_>>());
        }
        assert!(bus.stats().max_queue_depth >= 1);
    }

    #[test]
    fn topic_stream_emits_each_message() {
        let bus = bus_with("slam/tracking_lost", Schema::Json);
        let mut d = Dispatcher::new();
        let mut ts = topic_as_stream(&bus, &mut d, "slam/tracking_lost").unwrap();
        let out = d.collect(ts.stream_id()).unwrap();
        for (i, lost) in [false, true, false].into_iter().enumerate() {
            bus.publish_json("slam/tracking_lost", &json!({"lost": lost}), i as u64 * 10).unwrap();
        }
        assert!(out.borrow().is_empty());
        assert_eq!(ts.pump(&mut d).unwrap(), 3);
        let got: Vec<_> = out.borrow().iter().map(|e| (e.timestamp, e.payload["lost"].clone())).collect();
        assert_eq!(got, vec![(0, json!(false)), (10, json!(true)), (20, json!(false))]);
    }

    #[test]
    fn wrapping_twice_gives_independent_identical_streams() {
        let bus = bus_with("t", Schema::Binary);
        let mut d = Dispatcher::new();
        let mut a = topic_as_stream(&bus, &mut d, "t").unwrap();
        let mut b = topic_as_stream(&bus, &mut d, "t").unwrap();
        assert_ne!(a.stream_id(), b.stream_id());
        let (oa, ob) = (d.collect(a.stream_id()).unwrap(), d.collect(b.stream_id()).unwrap());
        for i in 0..4u8 {
            bus.publish("t", vec![i; i as usize + 1], u64::from(i)).unwrap();
        }
        a.pump(&mut d).unwrap();
        b.pump(&mut d).unwrap();
        let pa: Vec<_> = oa.borrow().iter().map(|e| (*e.payload).clone()).collect();
        let pb: Vec<_> = ob.borrow().iter().map(|e| (*e.payload).clone()).collect();
        assert_eq!(pa.len(), 4);
        assert_eq!(pa, pb);
        assert!(matches!(
            topic_as_stream(&bus, &mut d, "missing"),
            Err(BusError::UnknownTopic(_))
        ));
    }

    #[test]
    fn unused_wrapper_emits_nothing() {
        let bus = bus_with("t", Schema::Binary);
        let mut d = Dispatcher::new();
        let ts = topic_as_stream(&bus, &mut d, "t").unwrap();
        bus.publish("t", vec![1], 0).unwrap();
        assert_eq!(d.stats(ts.stream_id()).unwrap().emitted, 0);
    }
}
