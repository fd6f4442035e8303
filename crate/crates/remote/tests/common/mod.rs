#![allow(dead_code)]

use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ipp_core::env::{GpBasedEnv, MonitoringEnv};
use ipp_core::field::{generate_field, FieldSpec, ScalarField};
use ipp_core::fleet::{FleetConfig, LocalFleet, SyntheticSensor};
use ipp_core::gp::GpHyperparams;
use ipp_core::graph::{GridGraph, NodeId, OccupancyMask};
use ipp_core::mission::{run_mission, MissionLimits, MissionOutcome};
use ipp_core::planner::{EiPlanner, FloodingPlanner, GreedyPlanner, Planner};
use ipp_remote::backend::{BackendConfig, BackendSet, SensorFactory};
use ipp_remote::broker::{FaultPlan, LoopbackBroker};
use ipp_remote::fleet::{default_vehicle_ids, RemoteFleet, RemoteFleetConfig, Respawner};
use ipp_remote::trace::TraceWriter;

#[derive(Clone, Default)]
pub struct SharedBuf(pub Arc<Mutex<Vec<u8>>>);

impl Write for SharedBuf {
    fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(b);
        Ok(b.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl SharedBuf {
    pub fn lines(&self) -> Vec<serde_json::Value> {
        let bytes = self.0.lock().unwrap().clone();
        String::from_utf8(bytes)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

pub fn open_grid(rows: usize, cols: usize) -> Arc<GridGraph> {
    Arc::new(GridGraph::from_mask(OccupancyMask::from_fn(rows, cols, |_, _| true).unwrap(), 5.0).unwrap())
}

pub fn field_for(g: &GridGraph, seed: u64) -> ScalarField {
    generate_field(
        g,
        &FieldSpec {
            seed,
            ..FieldSpec::default()
        },
    )
    .unwrap()
}

pub fn planner(name: &str) -> Box<dyn Planner> {
    match name {
        "greedy" => Box::new(GreedyPlanner),
        "ei" => Box::new(EiPlanner::default()),
        "flooding" => Box::new(FloodingPlanner::default()),
        _ => unreachable!(),
    }
}

pub fn fleet_config(starts: &[usize], budget: Option<f64>) -> FleetConfig {
    FleetConfig {
        n_vehicles: starts.len(),
        initial_positions: starts.iter().map(|&s| NodeId(s)).collect(),
        max_distance: budget,
    }
}

pub fn gp_env(g: &Arc<GridGraph>, truth: &ScalarField) -> GpBasedEnv {
    GpBasedEnv::new(g.clone(), truth.clone(), GpHyperparams::default(), 0.0, 0).unwrap()
}

pub fn run_local(
    g: &Arc<GridGraph>,
    truth: &ScalarField,
    name: &str,
    starts: &[usize],
    budget: Option<f64>,
    limits: MissionLimits,
) -> MissionOutcome {
    let mut fleet = LocalFleet::new(
        g.clone(),
        fleet_config(starts, budget),
        Box::new(SyntheticSensor::new(Arc::new(truth.clone()), 0.0, 0)),
    )
    .unwrap();
    let mut env = gp_env(g, truth);
    run_mission(&mut fleet, &mut env as &mut dyn MonitoringEnv, planner(name).as_mut(), limits).unwrap()
}

pub struct Remote {
    pub broker: Arc<LoopbackBroker>,
    pub backends: Arc<BackendSet>,
    pub fleet: RemoteFleet,
    pub trace: SharedBuf,
}

pub struct RemoteSetup {
    pub backend: BackendConfig,
    pub faults: FaultPlan,
    pub respawn: bool,
    pub timeout_scale: f64,
}

impl Default for RemoteSetup {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            faults: FaultPlan::default(),
            respawn: true,
            timeout_scale: 0.05,
        }
    }
}

pub fn remote(
    g: &Arc<GridGraph>,
    truth: &ScalarField,
    starts: &[usize],
    budget: Option<f64>,
    setup: RemoteSetup,
) -> Remote {
    let broker = Arc::new(LoopbackBroker::with_faults(setup.faults));
    let ids = default_vehicle_ids(starts.len());
    let field = Arc::new(truth.clone());
    let sensors: SensorFactory =
        Arc::new(move |v| Box::new(SyntheticSensor::new(field.clone(), 0.0, v as u64)) as _);
    let backends = Arc::new(
        BackendSet::spawn(
            broker.clone(),
            g.clone(),
            ids.clone(),
            starts.iter().map(|&s| NodeId(s)).collect(),
            setup.backend,
            sensors,
            Duration::from_secs(5),
        )
        .unwrap(),
    );
    let trace = SharedBuf::default();
    let cfg = RemoteFleetConfig {
        timeout_scale: setup.timeout_scale,
        ..RemoteFleetConfig::new(ids)
    };
    let respawner: Option<Arc<dyn Respawner>> = if setup.respawn {
        Some(backends.clone())
    } else {
        None
    };
    let fleet = RemoteFleet::connect(
        g.clone(),
        broker.clone(),
        fleet_config(starts, budget),
        cfg,
        respawner,
        Some(Arc::new(Mutex::new(TraceWriter::new(trace.clone())))),
    )
    .unwrap();
    Remote {
        broker,
        backends,
        fleet,
        trace,
    }
}

pub fn run_remote(
    g: &Arc<GridGraph>,
    truth: &ScalarField,
    name: &str,
    starts: &[usize],
    budget: Option<f64>,
    limits: MissionLimits,
    setup: RemoteSetup,
) -> (MissionOutcome, Remote) {
    let mut r = remote(g, truth, starts, budget, setup);
    let mut env = gp_env(g, truth);
    let out = run_mission(&mut r.fleet, &mut env as &mut dyn MonitoringEnv, planner(name).as_mut(), limits).unwrap();
    (out, r)
}

pub fn decisions(out: &MissionOutcome) -> Vec<(usize, usize, usize)> {
    out.decisions
        .iter()
        .map(|d| (d.step, d.vehicle, d.target.index()))
        .collect()
}
