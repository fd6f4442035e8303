//! Publish/subscribe boundary and the in-process loopback broker.

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("client `{0}` is already connected")]
    DuplicateClient(String),
    #[error("session disconnected")]
    Disconnected,
    #[error("invalid topic filter `{0}`")]
    BadFilter(String),
    #[error("broker unreachable: {0}")]
    Unreachable(String),
}

/// Message published on the client's behalf if it vanishes without
/// disconnecting.
#[derive(Debug, Clone, PartialEq)]
pub struct LastWill {
    pub topic: String,
    pub payload: Vec<u8>,
}

pub trait Broker: Send + Sync {
    fn connect(&self, client_id: &str, will: Option<LastWill>) -> Result<Box<dyn Session>, BrokerError>;
}

/// One client connection with a single inbox. Messages on one topic arrive in
/// publish order.
pub trait Session: Send {
    fn client_id(&self) -> &str;
    fn subscribe(&mut self, filter: &str) -> Result<(), BrokerError>;
    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), BrokerError>;
    /// `Ok(None)` on timeout.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<(String, Vec<u8>)>, BrokerError>;
    /// Graceful disconnect; the last will is discarded.
    fn disconnect(self: Box<Self>);
}

/// MQTT-style matching: `+` matches one level, a trailing `#` the rest.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

pub(crate) fn valid_filter(filter: &str) -> bool {
    let levels: Vec<&str> = filter.split('/').collect();
    !filter.is_empty()
        && levels.iter().enumerate().all(|(i, l)| {
            (*l == "#" && i == levels.len() - 1) || *l == "+" || !l.contains(['+', '#'])
        })
}

/// Fault injection for the loopback broker.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    /// Topics (filters) whose messages are delivered twice.
    pub duplicate: Vec<String>,
    /// Topics (filters) whose messages are held back for the given time.
    pub delay: Vec<(String, Duration)>,
}

type Delivery = (String, Vec<u8>);

struct Client {
    inbox: Sender<Delivery>,
    filters: Vec<String>,
    will: Option<LastWill>,
    generation: u64,
}

struct Pending {
    due: Instant,
    order: u64,
    topic: String,
    payload: Vec<u8>,
}

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        (self.due, self.order) == (o.due, o.order)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.due, self.order).cmp(&(o.due, o.order))
    }
}

#[derive(Default)]
struct State {
    clients: BTreeMap<String, Client>,
    faults: FaultPlan,
    delayed: BinaryHeap<Reverse<Pending>>,
    order: u64,
    next_generation: u64,
    shutdown: bool,
    /// Topics every message was published on, in order; handy in tests.
    published: HashMap<String, u64>,
}

struct Inner {
    state: Mutex<State>,
    wake: Condvar,
}

/// In-process broker. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct LoopbackBroker {
    inner: Arc<Inner>,
}

impl Default for LoopbackBroker {
    fn default() -> Self {
        Self::new()
    }
}

impl LoopbackBroker {
    pub fn new() -> Self {
        let inner = Arc::new(Inner {
            state: Mutex::new(State::default()),
            wake: Condvar::new(),
        });
        let weak = Arc::downgrade(&inner);
        thread::spawn(move || delay_loop(weak));
        Self { inner }
    }

    pub fn with_faults(faults: FaultPlan) -> Self {
        let b = Self::new();
        b.set_faults(faults);
        b
    }

    pub fn set_faults(&self, faults: FaultPlan) {
        self.inner.state.lock().unwrap().faults = faults;
    }

    /// Severs a client as if its process died; its last will is published.
    pub fn drop_client(&self, client_id: &str) -> bool {
        let mut st = self.inner.state.lock().unwrap();
        match st.clients.remove(client_id) {
            Some(c) => {
                if let Some(w) = c.will {
                    route(&mut st, &self.inner.wake, &w.topic, &w.payload);
                }
                true
            }
            None => false,
        }
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.inner.state.lock().unwrap().clients.contains_key(client_id)
    }

    /// Number of messages published on `topic` so far.
    pub fn published_count(&self, topic: &str) -> u64 {
        self.inner
            .state
            .lock()
            .unwrap()
            .published
            .get(topic)
            .copied()
            .unwrap_or(0)
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        if let Ok(mut st) = self.state.lock() {
            st.shutdown = true;
        }
        self.wake.notify_all();
    }
}

fn delay_loop(inner: std::sync::Weak<Inner>) {
    loop {
        let Some(inner) = inner.upgrade() else { return };
        let mut st = inner.state.lock().unwrap();
        if st.shutdown {
            return;
        }
        let now = Instant::now();
        while st.delayed.peek().is_some_and(|p| p.0.due <= now) {
            let Reverse(p) = st.delayed.pop().unwrap();
            deliver(&mut st, &p.topic, &p.payload);
        }
        let wait = st
            .delayed
            .peek()
            .map(|p| p.0.due.saturating_duration_since(now))
            .unwrap_or(Duration::from_millis(50))
            .min(Duration::from_millis(50));
        let _ = inner.wake.wait_timeout(st, wait).unwrap();
    }
}

fn deliver(st: &mut State, topic: &str, payload: &[u8]) {
    let copies = if st.faults.duplicate.iter().any(|f| topic_matches(f, topic)) {
        2
    } else {
        1
    };
    for c in st.clients.values() {
        if c.filters.iter().any(|f| topic_matches(f, topic)) {
            for _ in 0..copies {
                let _ = c.inbox.send((topic.to_string(), payload.to_vec()));
            }
        }
    }
}

fn route(st: &mut State, wake: &Condvar, topic: &str, payload: &[u8]) {
    *st.published.entry(topic.to_string()).or_default() += 1;
    let delay = st
        .faults
        .delay
        .iter()
        .find(|(f, _)| topic_matches(f, topic))
        .map(|(_, d)| *d);
    // Anything already queued on this topic keeps its place ahead of us.
    let queued = st.delayed.iter().any(|p| p.0.topic == topic);
    match delay {
        None if !queued => deliver(st, topic, payload),
        _ => {
            let due = Instant::now() + delay.unwrap_or_default();
            let due = st
                .delayed
                .iter()
                .filter(|p| p.0.topic == topic)
                .map(|p| p.0.due)
                .max()
                .map_or(due, |d| d.max(due));
            st.order += 1;
            let order = st.order;
            st.delayed.push(Reverse(Pending {
                due,
                order,
                topic: topic.to_string(),
                payload: payload.to_vec(),
            }));
            wake.notify_all();
        }
    }
}

impl Broker for LoopbackBroker {
    fn connect(&self, client_id: &str, will: Option<LastWill>) -> Result<Box<dyn Session>, BrokerError> {
        let mut st = self.inner.state.lock().unwrap();
        if st.shutdown {
            return Err(BrokerError::Unreachable("broker shut down".into()));
        }
        if st.clients.contains_key(client_id) {
            return Err(BrokerError::DuplicateClient(client_id.to_string()));
        }
        let (tx, rx) = mpsc::channel();
        st.next_generation += 1;
        let generation = st.next_generation;
        st.clients.insert(
            client_id.to_string(),
            Client {
                inbox: tx,
                filters: Vec::new(),
                will,
                generation,
            },
        );
        Ok(Box::new(LoopbackSession {
            inner: self.inner.clone(),
            id: client_id.to_string(),
            generation,
            inbox: rx,
            graceful: false,
        }))
    }
}

struct LoopbackSession {
    inner: Arc<Inner>,
    id: String,
    generation: u64,
    inbox: Receiver<Delivery>,
    graceful: bool,
}

impl LoopbackSession {
    fn with_client<T>(&self, f: impl FnOnce(&mut State) -> T) -> Result<T, BrokerError> {
        let mut st = self.inner.state.lock().unwrap();
        match st.clients.get(&self.id) {
            Some(c) if c.generation == self.generation => Ok(f(&mut st)),
            _ => Err(BrokerError::Disconnected),
        }
    }
}

impl Session for LoopbackSession {
    fn client_id(&self) -> &str {
        &self.id
    }

    fn subscribe(&mut self, filter: &str) -> Result<(), BrokerError> {
        if !valid_filter(filter) {
            return Err(BrokerError::BadFilter(filter.to_string()));
        }
        let id = self.id.clone();
        self.with_client(|st| {
            let c = st.clients.get_mut(&id).expect("checked");
            if !c.filters.iter().any(|f| f == filter) {
                c.filters.push(filter.to_string());
            }
        })
    }

    fn publish(&mut self, topic: &str, payload: &[u8]) -> Result<(), BrokerError> {
        let wake = &self.inner.wake;
        self.with_client(|st| route(st, wake, topic, payload))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<(String, Vec<u8>)>, BrokerError> {
        match self.inbox.try_recv() {
            Ok(m) => return Ok(Some(m)),
            Err(mpsc::TryRecvError::Disconnected) => return Err(BrokerError::Disconnected),
            Err(mpsc::TryRecvError::Empty) => {}
        }
        if timeout.is_zero() {
            return Ok(None);
        }
        match self.inbox.recv_timeout(timeout) {
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BrokerError::Disconnected),
        }
    }

    fn disconnect(mut self: Box<Self>) {
        self.graceful = true;
        let mut st = self.inner.state.lock().unwrap();
        if st.clients.get(&self.id).is_some_and(|c| c.generation == self.generation) {
            st.clients.remove(&self.id);
        }
    }
}

impl Drop for LoopbackSession {
    fn drop(&mut self) {
        if self.graceful {
            return;
        }
        let mut st = self.inner.state.lock().unwrap();
        if st.clients.get(&self.id).is_some_and(|c| c.generation == self.generation) {
            let c = st.clients.remove(&self.id).expect("checked");
            if let Some(w) = c.will {
                route(&mut st, &self.inner.wake, &w.topic, &w.payload);
            }
        }
    }
}
