//! Fleet API over publish/subscribe: one session per vehicle, blocking moves
//! synchronised on acknowledgments.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use ipp_core::env::Measurement;
use ipp_core::fleet::{Fault, Fleet, FleetConfig, FleetError, Hop, MoveOutcome, VehicleState};
use ipp_core::graph::{GridGraph, NodeId, PathCost};

use crate::backend::{BackendSet, ResumeState};
use crate::broker::{Broker, BrokerError, Session};
use crate::trace::{CollectRecord, TraceWriter};
use crate::wire::{self, Payload, Topics, WireMessage};

/// Restarts a vehicle's backend after a crash or timeout.
pub trait Respawner: Send + Sync {
    fn respawn(&self, vehicle: usize, resume: ResumeState) -> Result<(), String>;
}

impl Respawner for BackendSet {
    fn respawn(&self, vehicle: usize, resume: ResumeState) -> Result<(), String> {
        BackendSet::respawn(self, vehicle, resume).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteFleetConfig {
    pub vehicle_ids: Vec<String>,
    /// Used only to size acknowledgment timeouts.
    pub speed_limit: f64,
    pub ack_timeout_base_s: f64,
    pub ack_timeout_factor: f64,
    /// Multiplies every timeout; logical-time backends run far faster than
    /// the wall clock.
    pub timeout_scale: f64,
    pub measurement_timeout_s: f64,
    /// Respawns or reconnects allowed per command.
    pub max_retries: u32,
}

impl RemoteFleetConfig {
    pub fn new(vehicle_ids: Vec<String>) -> Self {
        Self {
            vehicle_ids,
            speed_limit: 0.5,
            ack_timeout_base_s: 10.0,
            ack_timeout_factor: 3.0,
            timeout_scale: 1.0,
            measurement_timeout_s: 10.0,
            max_retries: 2,
        }
    }

    pub fn ack_timeout(&self, route_m: f64) -> Duration {
        let s = (route_m / self.speed_limit * self.ack_timeout_factor + self.ack_timeout_base_s)
            * self.timeout_scale;
        Duration::from_secs_f64(s.max(0.0))
    }
}

pub fn default_vehicle_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("asv{i}")).collect()
}

pub fn fleet_client_id(vehicle_id: &str) -> String {
    format!("fleet-{vehicle_id}")
}

const EPOCH_BITS: u32 = 32;

struct Link {
    vehicle: usize,
    id: String,
    topics: Topics,
    session: Option<Box<dyn Session>>,
    next_goto: u64,
    seen: HashSet<u64>,
    max_seen: u64,
    /// Messages below this sequence number come from a replaced backend.
    accept_from: u64,
    epoch: u64,
    last_sim_time: f64,
    last_state: Option<(f64, f64, f64)>,
}

impl Link {
    fn open(broker: &dyn Broker, vehicle: usize, id: &str) -> Result<Self, BrokerError> {
        let mut link = Self {
            vehicle,
            id: id.to_string(),
            topics: Topics::new(id),
            session: None,
            next_goto: 1,
            seen: HashSet::new(),
            max_seen: 0,
            accept_from: 0,
            epoch: 0,
            last_sim_time: 0.0,
            last_state: None,
        };
        link.reconnect(broker)?;
        Ok(link)
    }

    fn reconnect(&mut self, broker: &dyn Broker) -> Result<(), BrokerError> {
        if let Some(s) = self.session.take() {
            s.disconnect();
        }
        let mut s = broker.connect(&fleet_client_id(&self.id), None)?;
        s.subscribe(&self.topics.ack)?;
        s.subscribe(&self.topics.measurement)?;
        s.subscribe(&self.topics.state)?;
        self.session = Some(s);
        Ok(())
    }
}

struct Command {
    seq: u64,
    bytes: Vec<u8>,
    timeout: Duration,
}

struct Ack {
    node: NodeId,
    sim_time: f64,
    measurements: Vec<(u64, Measurement)>,
}

struct Shared<'a> {
    broker: &'a dyn Broker,
    respawner: Option<&'a dyn Respawner>,
    trace: Option<&'a Mutex<TraceWriter>>,
    max_retries: u32,
    measurement_timeout: Duration,
    clock: f64,
}

impl Shared<'_> {
    fn log(&self, dir: &str, topic: &str, bytes: &[u8]) {
        if let Some(t) = self.trace {
            t.lock().unwrap().message(self.clock, dir, topic, bytes);
        }
    }
}

enum Wake {
    Retry,
    Done(Result<Ack, Fault>),
}

fn publish(link: &mut Link, shared: &Shared<'_>, cmd: &Command) -> Result<(), BrokerError> {
    shared.log("out", &link.topics.cmd, &cmd.bytes);
    link.session
        .as_mut()
        .ok_or(BrokerError::Disconnected)?
        .publish(&link.topics.cmd, &cmd.bytes)
}

/// Replaces the backend, or reports `fault` when no retry is left.
fn recover(link: &mut Link, shared: &Shared<'_>, position: NodeId, retries: &mut u32, fault: Fault) -> Wake {
    let Some(r) = shared.respawner else {
        return Wake::Done(Err(fault));
    };
    if *retries >= shared.max_retries {
        return Wake::Done(Err(fault));
    }
    *retries += 1;
    link.epoch += 1;
    let floor = (link.max_seen + 1).max(link.epoch << EPOCH_BITS);
    link.accept_from = floor;
    let resume = ResumeState {
        node: position,
        sim_time: link.last_sim_time,
        seq_floor: floor,
    };
    match r.respawn(link.vehicle, resume) {
        Ok(()) => Wake::Retry,
        Err(e) => Wake::Done(Err(Fault::Backend(format!("respawn failed: {e}")))),
    }
}

/// Publishes `cmd` and blocks until its acknowledgment and every measurement
/// it announces have arrived.
fn exchange(link: &mut Link, shared: &Shared<'_>, position: NodeId, cmd: &Command) -> Result<Ack, Fault> {
    let mut retries = 0;
    let mut buffered: Vec<(u64, Measurement)> = Vec::new();
    let mut acked: Option<(NodeId, f64, u32)> = None;
    let mut reconnect = false;

    'attempt: loop {
        if reconnect {
            reconnect = false;
            if link.reconnect(shared.broker).is_err() {
                retries += 1;
                if retries > shared.max_retries {
                    return Err(Fault::Backend("broker unreachable".into()));
                }
                thread::sleep(Duration::from_millis(20));
                reconnect = true;
                continue;
            }
        }
        if publish(link, shared, cmd).is_err() {
            reconnect = true;
            retries += 1;
            if retries > shared.max_retries {
                return Err(Fault::Backend("broker unreachable".into()));
            }
            continue;
        }
        let mut deadline = Instant::now() + cmd.timeout;
        loop {
            if let Some((node, sim_time, samples)) = acked {
                if buffered.len() >= samples as usize {
                    buffered.sort_by_key(|m| m.0);
                    return Ok(Ack {
                        node,
                        sim_time,
                        measurements: buffered,
                    });
                }
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                let fault = if acked.is_some() {
                    Fault::MeasurementTimeout
                } else {
                    Fault::AckTimeout
                };
                match recover(link, shared, position, &mut retries, fault) {
                    Wake::Retry => {
                        buffered.clear();
                        acked = None;
                        continue 'attempt;
                    }
                    Wake::Done(r) => return r.map(|_| unreachable!()),
                }
            }
            let session = link.session.as_mut().expect("connected");
            let (topic, bytes) = match session.recv_timeout(left) {
                Ok(Some(m)) => m,
                Ok(None) => continue,
                Err(_) => {
                    reconnect = true;
                    retries += 1;
                    if retries > shared.max_retries {
                        return Err(Fault::Backend("broker connection lost".into()));
                    }
                    continue 'attempt;
                }
            };
            shared.log("in", &topic, &bytes);
            let Ok(msg) = wire::decode(&bytes) else { continue };
            if msg.vehicle_id != link.id {
                continue;
            }
            match msg.payload {
                Payload::Measurement { node, value, cmd_seq, .. } => {
                    if msg.seq < link.accept_from || !link.seen.insert(msg.seq) {
                        continue;
                    }
                    link.max_seen = link.max_seen.max(msg.seq);
                    if cmd_seq == cmd.seq {
                        buffered.push((
                            msg.seq,
                            Measurement {
                                vehicle: link.vehicle,
                                node,
                                value,
                            },
                        ));
                    } else if cmd_seq < cmd.seq {
                        return Err(Fault::StaleMeasurement);
                    }
                }
                Payload::Ack { acked_seq, node, sim_time, samples, .. } => {
                    if msg.seq < link.accept_from {
                        continue;
                    }
                    link.max_seen = link.max_seen.max(msg.seq);
                    if acked_seq == cmd.seq && acked.is_none() {
                        acked = Some((node, sim_time, samples));
                        deadline = deadline.max(Instant::now() + shared.measurement_timeout);
                    }
                }
                Payload::Error { ref_seq, code, message } => {
                    if msg.seq < link.accept_from && code == "offline" {
                        continue;
                    }
                    if code == "offline" {
                        match recover(link, shared, position, &mut retries, Fault::Backend(message)) {
                            Wake::Retry => {
                                buffered.clear();
                                acked = None;
                                continue 'attempt;
                            }
                            Wake::Done(r) => return r.map(|_| unreachable!()),
                        }
                    }
                    if ref_seq == cmd.seq {
                        return Err(Fault::Backend(format!("{code}: {message}")));
                    }
                }
                Payload::State { lat, lon, sim_time, .. } => {
                    link.last_state = Some((lat, lon, sim_time));
                }
                Payload::Goto { .. } => {}
            }
        }
    }
}

/// Vehicles driven through a broker.
pub struct RemoteFleet {
    graph: Arc<GridGraph>,
    broker: Arc<dyn Broker>,
    cfg: RemoteFleetConfig,
    vehicles: Vec<VehicleState>,
    links: Vec<Link>,
    pending: Vec<Vec<Measurement>>,
    hops: Vec<Hop>,
    clock: f64,
    batches: usize,
    respawner: Option<Arc<dyn Respawner>>,
    trace: Option<Arc<Mutex<TraceWriter>>>,
}

struct Plan {
    route: Vec<NodeId>,
    cost: PathCost,
    truncated: bool,
}

impl RemoteFleet {
    pub fn connect(
        graph: Arc<GridGraph>,
        broker: Arc<dyn Broker>,
        fleet: FleetConfig,
        cfg: RemoteFleetConfig,
        respawner: Option<Arc<dyn Respawner>>,
        trace: Option<Arc<Mutex<TraceWriter>>>,
    ) -> Result<Self, FleetError> {
        fleet.validate(&graph)?;
        if cfg.vehicle_ids.len() != fleet.n_vehicles {
            return Err(FleetError::PositionCount {
                expected: fleet.n_vehicles,
                got: cfg.vehicle_ids.len(),
            });
        }
        let links = cfg
            .vehicle_ids
            .iter()
            .enumerate()
            .map(|(i, id)| Link::open(broker.as_ref(), i, id))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FleetError::Transport(e.to_string()))?;
        Ok(Self {
            vehicles: fleet.vehicles(),
            pending: vec![Vec::new(); fleet.n_vehicles],
            hops: Vec::new(),
            clock: 0.0,
            batches: 0,
            graph,
            broker,
            cfg,
            links,
            respawner,
            trace,
        })
    }

    /// Latest reported (lat, lon, sim_time) per vehicle.
    pub fn last_states(&self) -> Vec<Option<(f64, f64, f64)>> {
        self.links.iter().map(|l| l.last_state).collect()
    }

    pub fn close(self) {
        for l in self.links {
            if let Some(s) = l.session {
                s.disconnect();
            }
        }
        if let Some(t) = &self.trace {
            let _ = t.lock().unwrap().flush();
        }
    }

    fn command(&mut self, vehicle: usize, node: NodeId, route_m: f64) -> Command {
        let link = &mut self.links[vehicle];
        let seq = link.next_goto;
        link.next_goto += 1;
        let (lat, lon) = self.graph.node_to_latlon(node).expect("validated node");
        let msg = WireMessage {
            vehicle_id: link.id.clone(),
            seq,
            payload: Payload::Goto {
                node,
                lat,
                lon,
                issued_at: self.clock,
            },
        };
        Command {
            seq,
            bytes: wire::encode(&msg),
            timeout: self.cfg.ack_timeout(route_m),
        }
    }

    /// Runs the commands concurrently, one thread per vehicle session.
    fn run(&mut self, commands: Vec<(usize, Command)>) -> Vec<(usize, Result<Ack, Fault>)> {
        let shared = Shared {
            broker: self.broker.as_ref(),
            respawner: self.respawner.as_deref(),
            trace: self.trace.as_deref(),
            max_retries: self.cfg.max_retries,
            measurement_timeout: Duration::from_secs_f64(
                self.cfg.measurement_timeout_s * self.cfg.timeout_scale,
            ),
            clock: self.clock,
        };
        let positions: Vec<NodeId> = self.vehicles.iter().map(|v| v.position).collect();
        let mut by_vehicle: Vec<Option<Command>> = (0..self.links.len()).map(|_| None).collect();
        for (i, c) in commands {
            by_vehicle[i] = Some(c);
        }
        let shared = &shared;
        let mut results: Vec<(usize, Result<Ack, Fault>)> = thread::scope(|s| {
            let handles: Vec<_> = self
                .links
                .iter_mut()
                .zip(by_vehicle)
                .enumerate()
                .filter_map(|(i, (link, cmd))| {
                    let cmd = cmd?;
                    let pos = positions[i];
                    Some(s.spawn(move || (i, exchange(link, shared, pos, &cmd))))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("vehicle session thread"))
                .collect()
        });
        results.sort_by_key(|r| r.0);
        results
    }

    fn plan(&self, v: &VehicleState, target: NodeId) -> Result<Option<Plan>, Fault> {
        let path = self
            .graph
            .shortest_path(v.position, target)
            .map_err(|_| Fault::Unreachable)?;
        let side = self.graph.cell_side();
        let mut cost = v.cost;
        let mut route = vec![v.position];
        for w in path.nodes.windows(2) {
            let kind = self.graph.edge_kind(w[0], w[1]).expect("route follows edges");
            let next = cost.add_edge(kind);
            if !v.affords(next, side) {
                break;
            }
            cost = next;
            route.push(w[1]);
        }
        if route.len() == 1 {
            return Ok(None);
        }
        let truncated = route.len() < path.nodes.len();
        Ok(Some(Plan {
            route,
            cost,
            truncated,
        }))
    }
}

impl Fleet for RemoteFleet {
    fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    fn move_to(&mut self, targets: &[Option<NodeId>]) -> Result<MoveOutcome, FleetError> {
        let n = self.vehicles.len();
        if targets.len() != n {
            return Err(FleetError::TargetCount {
                expected: n,
                got: targets.len(),
            });
        }
        if let Some(t) = targets.iter().flatten().find(|t| !self.graph.contains(**t)) {
            return Err(FleetError::InvalidTarget(*t));
        }
        let mut plans: Vec<Option<Plan>> = (0..n).map(|_| None).collect();
        for i in 0..n {
            let v = &self.vehicles[i];
            let Some(t) = targets[i] else { continue };
            if v.done || t == v.position {
                continue;
            }
            match self.plan(v, t) {
                Ok(Some(p)) => plans[i] = Some(p),
                Ok(None) => self.vehicles[i].done = true,
                Err(f) => {
                    self.vehicles[i].done = true;
                    self.vehicles[i].fault = Some(f);
                }
            }
        }
        let side = self.graph.cell_side();
        let commands: Vec<(usize, Command)> = (0..n)
            .filter_map(|i| {
                let p = plans[i].as_ref()?;
                let meters = (p.cost.meters(side) - self.vehicles[i].traveled).max(0.0);
                let last = *p.route.last().expect("non-empty route");
                Some((i, self.command(i, last, meters)))
            })
            .collect();
        let mut max_time = self.clock;
        for (i, result) in self.run(commands) {
            let plan = plans[i].take().expect("command implies plan");
            let v = &mut self.vehicles[i];
            let ack = match result {
                Ok(a) if a.node == *plan.route.last().expect("non-empty") => a,
                Ok(a) => {
                    v.done = true;
                    v.fault = Some(Fault::Backend(format!("acknowledged node {} instead of {}", a.node, plan.route.last().unwrap())));
                    continue;
                }
                Err(f) => {
                    v.done = true;
                    v.fault = Some(f);
                    continue;
                }
            };
            for w in plan.route.windows(2) {
                let kind = self.graph.edge_kind(w[0], w[1]).expect("route follows edges");
                self.hops.push(Hop {
                    vehicle: i,
                    from: w[0],
                    to: w[1],
                    meters: self.graph.edge_length(kind),
                });
            }
            v.position = ack.node;
            v.cost = plan.cost;
            v.traveled = plan.cost.meters(side);
            if plan.truncated {
                v.done = true;
            }
            self.links[i].last_sim_time = ack.sim_time;
            max_time = max_time.max(ack.sim_time);
            self.pending[i].extend(ack.measurements.into_iter().map(|m| m.1));
        }
        self.clock = max_time;
        Ok(MoveOutcome {
            reached: (0..n)
                .map(|i| targets[i].is_some_and(|t| self.vehicles[i].position == t))
                .collect(),
            dones: self.vehicles.iter().map(|v| v.done).collect(),
            faults: self.vehicles.iter().map(|v| v.fault.clone()).collect(),
        })
    }

    fn take_measurement(&mut self) -> Result<Vec<Measurement>, FleetError> {
        let n = self.vehicles.len();
        // Vehicles with a fatal fault have no live backend to ask.
        let idle: Vec<usize> = (0..n)
            .filter(|&i| self.pending[i].is_empty())
            .filter(|&i| !self.vehicles[i].fault.as_ref().is_some_and(Fault::is_fatal))
            .collect();
        let requests: Vec<(usize, Command)> = idle
            .into_iter()
            .map(|i| {
                let pos = self.vehicles[i].position;
                (i, self.command(i, pos, 0.0))
            })
            .collect();
        let mut max_time = self.clock;
        for (i, result) in self.run(requests) {
            match result {
                Ok(ack) => {
                    self.links[i].last_sim_time = ack.sim_time;
                    max_time = max_time.max(ack.sim_time);
                    self.pending[i] = ack.measurements.into_iter().map(|m| m.1).collect();
                }
                Err(fault) => {
                    let fault = match fault {
                        Fault::AckTimeout => Fault::MeasurementTimeout,
                        f => f,
                    };
                    self.vehicles[i].fault = Some(fault.clone());
                    self.vehicles[i].done = true;
                    return Err(FleetError::Vehicle { vehicle: i, fault });
                }
            }
        }
        self.clock = max_time;
        let batch: Vec<Measurement> = self.pending.iter_mut().flat_map(std::mem::take).collect();
        if let Some(t) = &self.trace {
            t.lock().unwrap().collect(&CollectRecord {
                batch: self.batches,
                t: self.clock,
                traveled: self.vehicles.iter().map(|v| v.traveled).collect(),
                measurements: batch.clone(),
            });
        }
        self.batches += 1;
        Ok(batch)
    }

    fn mark_done(&mut self, vehicle: usize) {
        if let Some(v) = self.vehicles.get_mut(vehicle) {
            v.done = true;
        }
    }

    fn hops(&self) -> &[Hop] {
        &self.hops
    }

    fn elapsed(&self) -> f64 {
        self.clock
    }
}
