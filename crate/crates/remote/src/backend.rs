//! Kinematic stand-in for an autopilot: follows shortest-path routes at a
//! bounded speed and speaks the wire protocol over a broker session.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use ipp_core::fleet::Sensor;
use ipp_core::graph::{GridGraph, NodeId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{Broker, BrokerError, LastWill, Session};
use crate::wire::{self, Payload, Topics, WireMessage};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("vehicle id `{0}` is used twice")]
    DuplicateId(String),
    #[error("vehicle id `{0}` is not a valid topic level")]
    BadId(String),
    #[error("start node {0} is not navigable")]
    BadStart(NodeId),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("backends did not report state within {0:?}: {1:?}")]
    Startup(Duration, Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pacing {
    /// Ticks run back to back; simulated time is decoupled from wall time.
    Logical,
    /// Ticks are paced against the wall clock, `speedup` times faster.
    RealTime { speedup: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub tick_dt: f64,
    /// Meters; `None` means 20% of the cell side.
    pub reach_tolerance: Option<f64>,
    /// Meters, applied to reported positions only.
    pub gps_noise_std: f64,
    pub speed_limit: f64,
    pub state_period_s: f64,
    /// Settling time before a non-empty route starts.
    pub waypoint_latency_s: f64,
    /// Crash after publishing this many measurements (fault injection).
    pub fail_after_measurements: Option<u64>,
    pub pacing: Pacing,
    pub parameter: String,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            tick_dt: 0.1,
            reach_tolerance: None,
            gps_noise_std: 0.0,
            speed_limit: 0.5,
            state_period_s: 1.0,
            waypoint_latency_s: 1.0,
            fail_after_measurements: None,
            pacing: Pacing::Logical,
            parameter: "ground_truth".into(),
            seed: 0,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.tick_dt) {
            return Err(BackendError::Config("tick_dt must be > 0".into()));
        }
        if !positive(self.speed_limit) {
            return Err(BackendError::Config("speed_limit must be > 0".into()));
        }
        if self.reach_tolerance.is_some_and(|t| !positive(t)) {
            return Err(BackendError::Config("reach_tolerance must be > 0".into()));
        }
        if !(self.gps_noise_std >= 0.0 && self.gps_noise_std.is_finite()) {
            return Err(BackendError::Config("gps_noise_std must be >= 0".into()));
        }
        if !positive(self.state_period_s) {
            return Err(BackendError::Config("state_period_s must be > 0".into()));
        }
        if !(self.waypoint_latency_s >= 0.0 && self.waypoint_latency_s.is_finite()) {
            return Err(BackendError::Config("waypoint_latency_s must be >= 0".into()));
        }
        if let Pacing::RealTime { speedup } = self.pacing {
            if !positive(speedup) {
                return Err(BackendError::Config("speedup must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicState {
    /// Planar meters, same frame as `GridGraph::position`.
    pub position: (f64, f64),
    /// Last node reached.
    pub node: NodeId,
    pub speed_limit: f64,
    pub heading_deg: f64,
    pub active_route: Vec<NodeId>,
    pub sim_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinematicEvent {
    /// Came within the reach tolerance of an intermediate route node.
    Passed(NodeId),
    /// Stopped exactly on the final route node.
    Arrived(NodeId),
}

/// First-order motion along a route polyline.
#[derive(Debug, Clone)]
pub struct Kinematics {
    graph: Arc<GridGraph>,
    tolerance: f64,
    pub state: KinematicState,
    leg: usize,
    passed: usize,
    latency_left: f64,
}

const EPS: f64 = 1e-9;

impl Kinematics {
    pub fn new(graph: Arc<GridGraph>, start: NodeId, speed_limit: f64, tolerance: f64, sim_time: f64) -> Self {
        Self {
            state: KinematicState {
                position: graph.position(start),
                node: start,
                speed_limit,
                heading_deg: 0.0,
                active_route: Vec::new(),
                sim_time,
            },
            graph,
            tolerance,
            leg: 0,
            passed: 0,
            latency_left: 0.0,
        }
    }

    pub fn is_moving(&self) -> bool {
        !self.state.active_route.is_empty()
    }

    /// `route` must start at the current node.
    pub fn set_route(&mut self, route: Vec<NodeId>, latency: f64) {
        debug_assert_eq!(route.first(), Some(&self.state.node));
        self.state.active_route = if route.len() > 1 { route } else { Vec::new() };
        self.leg = 0;
        self.passed = 0;
        self.latency_left = latency;
    }

    pub fn tick(&mut self, dt: f64) -> Vec<KinematicEvent> {
        self.state.sim_time += dt;
        let mut events = Vec::new();
        if !self.is_moving() {
            return events;
        }
        if self.latency_left > EPS {
            self.latency_left -= dt;
            return events;
        }
        let mut budget = self.state.speed_limit * dt;
        let last = self.state.active_route.len() - 1;
        while self.is_moving() {
            let next = self.state.active_route[self.leg + 1];
            let p = self.graph.position(next);
            let (dx, dy) = (p.0 - self.state.position.0, p.1 - self.state.position.1);
            let d = dx.hypot(dy);
            if d > 0.0 {
                // Compass heading with y growing southwards.
                self.state.heading_deg = dx.atan2(-dy).to_degrees().rem_euclid(360.0);
            }
            if d <= budget + EPS {
                self.state.position = p;
                self.state.node = next;
                budget = (budget - d).max(0.0);
                self.leg += 1;
                if self.leg == last {
                    self.state.active_route.clear();
                    events.push(KinematicEvent::Arrived(next));
                } else if self.passed < self.leg {
                    self.passed = self.leg;
                    events.push(KinematicEvent::Passed(next));
                }
                if budget <= EPS {
                    break;
                }
            } else {
                let s = budget / d;
                self.state.position.0 += dx * s;
                self.state.position.1 += dy * s;
                if self.leg + 1 < last && self.passed <= self.leg && d - budget <= self.tolerance {
                    self.passed = self.leg + 1;
                    events.push(KinematicEvent::Passed(next));
                }
                break;
            }
        }
        events
    }
}

/// Where a respawned backend picks up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResumeState {
    pub node: NodeId,
    pub sim_time: f64,
    /// First sequence number for every outbound stream.
    pub seq_floor: u64,
}

type Outgoing = (String, Vec<u8>);

struct Active {
    seq: u64,
    target: NodeId,
    sent: Vec<Outgoing>,
    samples: u32,
}

/// Protocol state machine of one backend, independent of threads and clocks.
pub struct BackendCore {
    id: String,
    vehicle: usize,
    topics: Topics,
    graph: Arc<GridGraph>,
    cfg: BackendConfig,
    pub kin: Kinematics,
    sensor: Box<dyn Sensor>,
    next_seq: u64,
    highest_goto: Option<u64>,
    active: Option<Active>,
    completed: BTreeMap<u64, Vec<Outgoing>>,
    measurements_sent: u64,
    next_state_at: f64,
    gps: ChaCha8Rng,
    acks_sent: u64,
}

const COMPLETED_KEPT: usize = 16;

impl BackendCore {
    pub fn new(
        id: &str,
        vehicle: usize,
        graph: Arc<GridGraph>,
        start: NodeId,
        cfg: BackendConfig,
        sensor: Box<dyn Sensor>,
        resume: Option<ResumeState>,
    ) -> Result<Self, BackendError> {
        cfg.validate()?;
        if !wire::valid_vehicle_id(id) {
            return Err(BackendError::BadId(id.to_string()));
        }
        let start = resume.map_or(start, |r| r.node);
        if !graph.contains(start) {
            return Err(BackendError::BadStart(start));
        }
        let sim_time = resume.map_or(0.0, |r| r.sim_time);
        let tolerance = cfg.reach_tolerance.unwrap_or(0.2 * graph.cell_side());
        Ok(Self {
            id: id.to_string(),
            vehicle,
            topics: Topics::new(id),
            kin: Kinematics::new(graph.clone(), start, cfg.speed_limit, tolerance, sim_time),
            graph,
            gps: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
            next_state_at: sim_time + cfg.state_period_s,
            cfg,
            sensor,
            next_seq: resume.map_or(0, |r| r.seq_floor),
            highest_goto: None,
            active: None,
            completed: BTreeMap::new(),
            measurements_sent: 0,
            acks_sent: 0,
        })
    }

    pub fn topics(&self) -> &Topics {
        &self.topics
    }

    pub fn is_moving(&self) -> bool {
        self.kin.is_moving()
    }

    pub fn acks_sent(&self) -> u64 {
        self.acks_sent
    }

    /// True once the configured crash point has been passed.
    pub fn crashed(&self) -> bool {
        self.cfg
            .fail_after_measurements
            .is_some_and(|n| self.measurements_sent >= n)
    }

    fn msg(&mut self, topic: String, payload: Payload) -> Outgoing {
        let m = WireMessage {
            vehicle_id: self.id.clone(),
            seq: self.next_seq,
            payload,
        };
        self.next_seq += 1;
        (topic, wire::encode(&m))
    }

    pub fn state_message(&mut self) -> Outgoing {
        let (mut x, mut y) = self.kin.state.position;
        if self.cfg.gps_noise_std > 0.0 {
            let n = Normal::new(0.0, self.cfg.gps_noise_std).expect("validated");
            x += n.sample(&mut self.gps);
            y += n.sample(&mut self.gps);
        }
        let (lat, lon) = self.graph.planar_to_latlon(x, y);
        let wall_time = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        let topic = self.topics.state.clone();
        self.msg(
            topic,
            Payload::State {
                lat,
                lon,
                sim_time: self.kin.state.sim_time,
                wall_time,
            },
        )
    }

    fn error(&mut self, ref_seq: u64, code: &str, message: String) -> Outgoing {
        let topic = self.topics.ack.clone();
        self.msg(
            topic,
            Payload::Error {
                ref_seq,
                code: code.into(),
                message,
            },
        )
    }

    fn measure(&mut self, node: NodeId) -> Outgoing {
        let cmd_seq = self.active.as_ref().expect("measuring inside a command").seq;
        let value = self.sensor.read(self.vehicle, node);
        let topic = self.topics.measurement.clone();
        let out = match value {
            Ok(value) => {
                let parameter = self.cfg.parameter.clone();
                self.measurements_sent += 1;
                self.msg(
                    topic,
                    Payload::Measurement {
                        node,
                        value,
                        parameter,
                        cmd_seq,
                    },
                )
            }
            Err(e) => self.error(cmd_seq, "sensor", e.to_string()),
        };
        let active = self.active.as_mut().expect("checked");
        active.samples += 1;
        active.sent.push(out.clone());
        out
    }

    fn finish(&mut self, node: NodeId) -> Vec<Outgoing> {
        let mut out = vec![self.measure(node)];
        let active = self.active.as_ref().expect("finishing a command");
        let (seq, samples, target) = (active.seq, active.samples, active.target);
        let topic = self.topics.ack.clone();
        let ack = self.msg(
            topic,
            Payload::Ack {
                acked_seq: seq,
                reached: node == target,
                node,
                sim_time: self.kin.state.sim_time,
                samples,
            },
        );
        self.acks_sent += 1;
        out.push(ack);
        let mut active = self.active.take().expect("checked");
        active.sent.push(out[1].clone());
        self.completed.insert(seq, active.sent);
        while self.completed.len() > COMPLETED_KEPT {
            self.completed.pop_first();
        }
        out
    }

    /// Reacts to one inbound message.
    pub fn handle(&mut self, bytes: &[u8]) -> Vec<Outgoing> {
        let msg = match wire::decode(bytes) {
            Ok(m) => m,
            Err(e) => return vec![self.error(0, "decode", e.to_string())],
        };
        let Payload::Goto { node, issued_at, .. } = msg.payload else {
            return Vec::new();
        };
        let seq = msg.seq;
        if let Some(sent) = self.completed.get(&seq) {
            return sent.clone();
        }
        if self.active.as_ref().is_some_and(|a| a.seq == seq) {
            return Vec::new();
        }
        if self.highest_goto.is_some_and(|h| seq <= h) {
            return Vec::new();
        }
        if self.active.is_some() {
            return vec![self.error(seq, "busy", "a command is still in progress".into())];
        }
        self.highest_goto = Some(seq);
        if !self.graph.contains(node) {
            return vec![self.error(seq, "invalid_node", format!("node {node} does not exist"))];
        }
        let route = match self.graph.shortest_path(self.kin.state.node, node) {
            Ok(p) => p.nodes,
            Err(e) => return vec![self.error(seq, "unreachable", e.to_string())],
        };
        self.kin.state.sim_time = self.kin.state.sim_time.max(issued_at);
        self.active = Some(Active {
            seq,
            target: node,
            sent: Vec::new(),
            samples: 0,
        });
        if route.len() == 1 {
            return self.finish(node);
        }
        self.kin.set_route(route, self.cfg.waypoint_latency_s);
        Vec::new()
    }

    /// Advances one tick.
    pub fn tick(&mut self) -> Vec<Outgoing> {
        let events = self.kin.tick(self.cfg.tick_dt);
        let mut out = Vec::new();
        for e in events {
            match e {
                KinematicEvent::Passed(n) => out.push(self.measure(n)),
                KinematicEvent::Arrived(n) => out.extend(self.finish(n)),
            }
        }
        if self.kin.state.sim_time + EPS >= self.next_state_at {
            self.next_state_at += self.cfg.state_period_s;
            out.push(self.state_message());
        }
        out
    }
}

/// What a backend session is built from.
pub struct BackendSpec {
    pub id: String,
    pub vehicle: usize,
    pub start: NodeId,
    pub config: BackendConfig,
    pub sensor: Box<dyn Sensor>,
    pub resume: Option<ResumeState>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendExit {
    Stopped,
    /// Fault injection fired; the session was abandoned.
    Crashed,
    Disconnected,
}

pub struct BackendHandle {
    pub id: String,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<BackendExit>>,
}

impl BackendHandle {
    pub fn is_finished(&self) -> bool {
        self.join.as_ref().is_none_or(|j| j.is_finished())
    }

    pub fn stop(mut self) -> BackendExit {
        self.stop.store(true, Ordering::SeqCst);
        self.join
            .take()
            .map(|j| j.join().unwrap_or(BackendExit::Crashed))
            .unwrap_or(BackendExit::Stopped)
    }
}

impl Drop for BackendHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

pub fn backend_client_id(vehicle_id: &str) -> String {
    format!("backend-{vehicle_id}")
}

/// Connects, announces itself with one state message and starts serving.
pub fn spawn_backend(
    broker: &dyn Broker,
    graph: Arc<GridGraph>,
    spec: BackendSpec,
) -> Result<BackendHandle, BackendError> {
    let BackendSpec {
        id,
        vehicle,
        start,
        config,
        sensor,
        resume,
    } = spec;
    let pacing = config.pacing;
    let dt = config.tick_dt;
    let mut core = BackendCore::new(&id, vehicle, graph, start, config, sensor, resume)?;
    // Carries the sequence floor so a fleet can tell a stale will from a live one.
    let will = WireMessage {
        vehicle_id: id.clone(),
        seq: resume.map_or(0, |r| r.seq_floor),
        payload: Payload::Error {
            ref_seq: 0,
            code: "offline".into(),
            message: "backend connection lost".into(),
        },
    };
    let mut session = broker.connect(
        &backend_client_id(&id),
        Some(LastWill {
            topic: core.topics().ack.clone(),
            payload: wire::encode(&will),
        }),
    )?;
    session.subscribe(&core.topics().cmd.clone())?;
    let (topic, bytes) = core.state_message();
    session.publish(&topic, &bytes)?;

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let join = thread::Builder::new()
        .name(format!("backend-{id}"))
        .spawn(move || serve(session, core, pacing, dt, flag))
        .map_err(|e| BackendError::Config(e.to_string()))?;
    Ok(BackendHandle {
        id,
        stop,
        join: Some(join),
    })
}

fn serve(
    mut session: Box<dyn Session>,
    mut core: BackendCore,
    pacing: Pacing,
    dt: f64,
    stop: Arc<AtomicBool>,
) -> BackendExit {
    let idle = Duration::from_millis(20);
    let mut next_tick = Instant::now();
    loop {
        if stop.load(Ordering::SeqCst) {
            session.disconnect();
            return BackendExit::Stopped;
        }
        let timeout = match pacing {
            Pacing::Logical if core.is_moving() => Duration::ZERO,
            Pacing::Logical => idle,
            Pacing::RealTime { .. } => next_tick.saturating_duration_since(Instant::now()).min(idle),
        };
        let outgoing = match session.recv_timeout(timeout) {
            Ok(Some((_, bytes))) => core.handle(&bytes),
            Ok(None) => {
                let due = match pacing {
                    Pacing::Logical => core.is_moving(),
                    Pacing::RealTime { speedup } => {
                        let now = Instant::now();
                        let due = now >= next_tick;
                        if due {
                            next_tick += Duration::from_secs_f64(dt / speedup);
                        }
                        due
                    }
                };
                if due {
                    core.tick()
                } else {
                    Vec::new()
                }
            }
            Err(_) => return BackendExit::Disconnected,
        };
        for (topic, bytes) in outgoing {
            if session.publish(&topic, &bytes).is_err() {
                return BackendExit::Disconnected;
            }
            if core.crashed() {
                // Dropping without disconnect fires the last will.
                return BackendExit::Crashed;
            }
        }
    }
}

/// Produces a fresh sensor for a vehicle index.
pub type SensorFactory = Arc<dyn Fn(usize) -> Box<dyn Sensor> + Send + Sync>;

/// One backend per vehicle, with respawn support.
pub struct BackendSet {
    broker: Arc<dyn Broker>,
    graph: Arc<GridGraph>,
    ids: Vec<String>,
    starts: Vec<NodeId>,
    config: BackendConfig,
    sensors: SensorFactory,
    handles: Mutex<Vec<Option<BackendHandle>>>,
    respawns: Mutex<u32>,
}

impl BackendSet {
    /// Spawns every backend and waits until each has published state.
    pub fn spawn(
        broker: Arc<dyn Broker>,
        graph: Arc<GridGraph>,
        ids: Vec<String>,
        starts: Vec<NodeId>,
        config: BackendConfig,
        sensors: SensorFactory,
        startup_timeout: Duration,
    ) -> Result<Self, BackendError> {
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(BackendError::DuplicateId(id.clone()));
            }
        }
        if ids.len() != starts.len() {
            return Err(BackendError::Config("one start node per vehicle id is required".into()));
        }
        let mut monitor = broker.connect("backend-monitor", None)?;
        monitor.subscribe("fleet/+/state")?;
        let mut handles = Vec::with_capacity(ids.len());
        for (v, id) in ids.iter().enumerate() {
            let per_vehicle = BackendConfig {
                seed: config.seed.wrapping_add(v as u64),
                ..config.clone()
            };
            handles.push(Some(spawn_backend(
                broker.as_ref(),
                graph.clone(),
                BackendSpec {
                    id: id.clone(),
                    vehicle: v,
                    start: starts[v],
                    config: per_vehicle,
                    sensor: sensors(v),
                    resume: None,
                },
            )?));
        }
        let deadline = Instant::now() + startup_timeout;
        let mut missing: Vec<String> = ids.clone();
        while !missing.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                monitor.disconnect();
                return Err(BackendError::Startup(startup_timeout, missing));
            }
            if let Some((_, bytes)) = monitor.recv_timeout(left)? {
                if let Ok(m) = wire::decode(&bytes) {
                    missing.retain(|id| *id != m.vehicle_id);
                }
            }
        }
        monitor.disconnect();
        Ok(Self {
            broker,
            graph,
            ids,
            starts,
            config,
            sensors,
            handles: Mutex::new(handles),
            respawns: Mutex::new(0),
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn starts(&self) -> &[NodeId] {
        &self.starts
    }

    pub fn respawn_count(&self) -> u32 {
        *self.respawns.lock().unwrap()
    }

    /// Replaces the backend of `vehicle`. Fault injection is not carried over.
    pub fn respawn(&self, vehicle: usize, resume: ResumeState) -> Result<(), BackendError> {
        let mut handles = self.handles.lock().unwrap();
        if let Some(old) = handles[vehicle].take() {
            old.stop();
        }
        let config = BackendConfig {
            seed: self.config.seed.wrapping_add(vehicle as u64),
            fail_after_measurements: None,
            ..self.config.clone()
        };
        handles[vehicle] = Some(spawn_backend(
            self.broker.as_ref(),
            self.graph.clone(),
            BackendSpec {
                id: self.ids[vehicle].clone(),
                vehicle,
                start: resume.node,
                config,
                sensor: (self.sensors)(vehicle),
                resume: Some(resume),
            },
        )?);
        *self.respawns.lock().unwrap() += 1;
        Ok(())
    }

    pub fn shutdown(&self) -> Vec<BackendExit> {
        let mut handles = self.handles.lock().unwrap();
        handles
            .iter_mut()
            .filter_map(Option::take)
            .map(BackendHandle::stop)
            .collect()
    }
}

impl Drop for BackendSet {
    fn drop(&mut self) {
        self.shutdown();
    }
}
