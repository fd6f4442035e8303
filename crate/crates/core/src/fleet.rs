//! Vehicle state, the fleet API shared by every execution level, and the
//! in-process fleet whose vehicles hop one edge per move call.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Measurement;
use crate::field::{self, ScalarField};
use crate::graph::{GridGraph, NodeId, PathCost};
use crate::planner::VehicleView;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Unreachable,
    AckTimeout,
    MeasurementTimeout,
    StaleMeasurement,
    Backend(String),
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fault::Unreachable => f.write_str("target unreachable"),
            Fault::AckTimeout => f.write_str("acknowledgment timed out"),
            Fault::MeasurementTimeout => f.write_str("measurement timed out"),
            Fault::StaleMeasurement => f.write_str("measurement older than last acknowledgment"),
            Fault::Backend(m) => write!(f, "backend error: {m}"),
        }
    }
}

impl Fault {
    /// Faults that end the mission rather than just the vehicle.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, Fault::Unreachable)
    }
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("fleet needs at least one vehicle")]
    NoVehicles,
    #[error("expected {expected} initial positions, got {got}")]
    PositionCount { expected: usize, got: usize },
    #[error("initial position {0} is not a navigable node")]
    InvalidPosition(NodeId),
    #[error("max_distance must be finite and >= 0, got {0}")]
    Budget(f64),
    #[error("expected {expected} targets, got {got}")]
    TargetCount { expected: usize, got: usize },
    #[error("target {0} is not a navigable node")]
    InvalidTarget(NodeId),
    #[error("sensor failure: {0}")]
    Sensor(String),
    #[error("vehicle {vehicle}: {fault}")]
    Vehicle { vehicle: usize, fault: Fault },
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub position: NodeId,
    /// Exact edge counts behind `traveled`.
    pub cost: PathCost,
    pub traveled: f64,
    /// `None` means unlimited.
    pub max_distance: Option<f64>,
    pub done: bool,
    pub fault: Option<Fault>,
}

impl VehicleState {
    pub fn new(id: usize, position: NodeId, max_distance: Option<f64>) -> Self {
        Self {
            id,
            position,
            cost: PathCost::ZERO,
            traveled: 0.0,
            max_distance,
            done: false,
            fault: None,
        }
    }

    pub fn remaining(&self) -> Option<f64> {
        self.max_distance.map(|m| (m - self.traveled).max(0.0))
    }

    /// Whether a route of `cost` in total stays inside the budget.
    pub fn affords(&self, cost: PathCost, side: f64) -> bool {
        self.max_distance.is_none_or(|m| cost.meters(side) <= m)
    }

    pub fn view(&self) -> VehicleView {
        VehicleView {
            position: self.position,
            remaining: self.remaining(),
            done: self.done,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub n_vehicles: usize,
    pub initial_positions: Vec<NodeId>,
    pub max_distance: Option<f64>,
}

impl FleetConfig {
    pub fn validate(&self, g: &GridGraph) -> Result<(), FleetError> {
        if self.n_vehicles == 0 {
            return Err(FleetError::NoVehicles);
        }
        if self.initial_positions.len() != self.n_vehicles {
            return Err(FleetError::PositionCount {
                expected: self.n_vehicles,
                got: self.initial_positions.len(),
            });
        }
        if let Some(&p) = self.initial_positions.iter().find(|p| !g.contains(**p)) {
            return Err(FleetError::InvalidPosition(p));
        }
        if let Some(m) = self.max_distance {
            if !(m.is_finite() && m >= 0.0) {
                return Err(FleetError::Budget(m));
            }
        }
        Ok(())
    }

    pub fn vehicles(&self) -> Vec<VehicleState> {
        self.initial_positions
            .iter()
            .enumerate()
            .map(|(i, &p)| VehicleState::new(i, p, self.max_distance))
            .collect()
    }
}

/// One edge actually traversed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    pub vehicle: usize,
    pub from: NodeId,
    pub to: NodeId,
    pub meters: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoveOutcome {
    pub reached: Vec<bool>,
    pub dones: Vec<bool>,
    pub faults: Vec<Option<Fault>>,
}

/// Source of measurement values at nodes.
pub trait Sensor: Send {
    fn read(&mut self, vehicle: usize, node: NodeId) -> Result<f64, FleetError>;
}

/// Samples a shared field with additive Gaussian noise.
pub struct SyntheticSensor {
    field: Arc<ScalarField>,
    noise_std: f64,
    rng: ChaCha8Rng,
}

impl SyntheticSensor {
    pub fn new(field: Arc<ScalarField>, noise_std: f64, seed: u64) -> Self {
        Self {
            field,
            noise_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }
}

impl Sensor for SyntheticSensor {
    fn read(&mut self, _vehicle: usize, node: NodeId) -> Result<f64, FleetError> {
        field::sample(&self.field, node, self.noise_std, &mut self.rng)
            .map_err(|e| FleetError::Sensor(e.to_string()))
    }
}

/// Batch API every execution level implements.
pub trait Fleet {
    fn vehicles(&self) -> &[VehicleState];
    /// Advances every non-done vehicle towards its target. `None` targets and
    /// done vehicles are left alone.
    fn move_to(&mut self, targets: &[Option<NodeId>]) -> Result<MoveOutcome, FleetError>;
    /// Measurements at every node entered since the previous call, or at the
    /// current node for vehicles that did not move. Vehicle-index order.
    fn take_measurement(&mut self) -> Result<Vec<Measurement>, FleetError>;
    fn mark_done(&mut self, vehicle: usize);
    /// All hops taken so far, in execution order.
    fn hops(&self) -> &[Hop];
    /// Simulated mission time in seconds.
    fn elapsed(&self) -> f64;

    fn views(&self) -> Vec<VehicleView> {
        self.vehicles().iter().map(VehicleState::view).collect()
    }

    fn all_done(&self) -> bool {
        self.vehicles().iter().all(|v| v.done)
    }
}

/// Vehicles as graph tokens. Hops take no simulated time.
pub struct LocalFleet {
    graph: Arc<GridGraph>,
    config: FleetConfig,
    vehicles: Vec<VehicleState>,
    pending: Vec<Vec<NodeId>>,
    hops: Vec<Hop>,
    sensor: Box<dyn Sensor>,
}

impl LocalFleet {
    pub fn new(
        graph: Arc<GridGraph>,
        config: FleetConfig,
        sensor: Box<dyn Sensor>,
    ) -> Result<Self, FleetError> {
        config.validate(&graph)?;
        Ok(Self {
            vehicles: config.vehicles(),
            pending: vec![Vec::new(); config.n_vehicles],
            hops: Vec::new(),
            graph,
            config,
            sensor,
        })
    }

    /// Back to the initial state of `config`.
    pub fn reset(&mut self, config: FleetConfig) -> Result<(), FleetError> {
        config.validate(&self.graph)?;
        self.vehicles = config.vehicles();
        self.pending = vec![Vec::new(); config.n_vehicles];
        self.hops.clear();
        self.config = config;
        Ok(())
    }

    pub fn config(&self) -> &FleetConfig {
        &self.config
    }
}

impl Fleet for LocalFleet {
    fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    fn move_to(&mut self, targets: &[Option<NodeId>]) -> Result<MoveOutcome, FleetError> {
        if targets.len() != self.vehicles.len() {
            return Err(FleetError::TargetCount {
                expected: self.vehicles.len(),
                got: targets.len(),
            });
        }
        if let Some(t) = targets.iter().flatten().find(|t| !self.graph.contains(**t)) {
            return Err(FleetError::InvalidTarget(*t));
        }
        let side = self.graph.cell_side();
        let mut out = MoveOutcome {
            reached: vec![false; targets.len()],
            dones: vec![false; targets.len()],
            faults: vec![None; targets.len()],
        };
        for (i, target) in targets.iter().enumerate() {
            let v = &mut self.vehicles[i];
            match *target {
                Some(t) if !v.done && t != v.position => {
                    match self.graph.shortest_path(v.position, t) {
                        Ok(path) => {
                            let next = path.nodes[1];
                            let kind = self
                                .graph
                                .edge_kind(v.position, next)
                                .expect("route follows edges");
                            let cost = v.cost.add_edge(kind);
                            if v.affords(cost, side) {
                                self.hops.push(Hop {
                                    vehicle: i,
                                    from: v.position,
                                    to: next,
                                    meters: self.graph.edge_length(kind),
                                });
                                v.position = next;
                                v.cost = cost;
                                v.traveled = cost.meters(side);
                                self.pending[i].push(next);
                            } else {
                                v.done = true;
                            }
                        }
                        Err(_) => {
                            v.done = true;
                            v.fault = Some(Fault::Unreachable);
                        }
                    }
                    out.reached[i] = v.position == t;
                }
                Some(t) => out.reached[i] = v.position == t,
                None => {}
            }
            out.dones[i] = v.done;
            out.faults[i] = v.fault.clone();
        }
        Ok(out)
    }

    fn take_measurement(&mut self) -> Result<Vec<Measurement>, FleetError> {
        let mut batch = Vec::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            let nodes = std::mem::take(&mut self.pending[i]);
            let nodes = if nodes.is_empty() { vec![v.position] } else { nodes };
            for node in nodes {
                let value = self.sensor.read(i, node)?;
                batch.push(Measurement {
                    vehicle: i,
                    node,
                    value,
                });
            }
        }
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
        0.0
    }
}
