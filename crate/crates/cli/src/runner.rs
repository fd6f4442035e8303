//! Builds a mission from a scenario, runs it at the configured level and
//! writes the run directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ipp_core::env::{GpBasedEnv, MetricsRecord, ModelMetrics, MonitoringEnv, OilSpillEnv, TrashCleanEnv};
use ipp_core::field::{generate_field, load_external_map, ScalarField};
use ipp_core::fleet::{Fleet, FleetConfig, Hop, LocalFleet, SyntheticSensor};
use ipp_core::graph::GridGraph;
use ipp_core::mission::{run_mission, MissionError, MissionLimits, MissionOutcome};
use ipp_core::planner::{EiPlanner, FloodingPlanner, GreedyPlanner, Planner};
use ipp_remote::backend::{BackendSet, SensorFactory};
use ipp_remote::broker::{Broker, LoopbackBroker};
use ipp_remote::fleet::{RemoteFleet, Respawner};
use ipp_remote::trace::{read_collects, TraceWriter};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{BrokerKind, EnvName, Level, PlannerName, ScenarioConfig, TruthSource};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("backends: {0}")]
    Backends(String),
    #[error(transparent)]
    Mission(#[from] MissionError),
    #[error("artifacts: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace: {0}")]
    Trace(String),
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "wire_trace.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// Graph and ground truth of a scenario.
pub struct World {
    pub graph: Arc<GridGraph>,
    pub truth: ScalarField,
}

pub fn build_world(cfg: &ScenarioConfig) -> Result<World, RunError> {
    let graph = cfg.graph().map_err(RunError::Scenario)?;
    let truth = match &cfg.truth {
        TruthSource::Synthetic(spec) => generate_field(&graph, spec),
        TruthSource::External(p) => load_external_map(&graph, p),
    }
    .map_err(|e| RunError::Scenario(e.to_string()))?;
    Ok(World { graph, truth })
}

pub fn build_env(cfg: &ScenarioConfig, world: &World) -> Result<Box<dyn MonitoringEnv>, RunError> {
    let g = world.graph.clone();
    let env: Box<dyn MonitoringEnv> = match cfg.env.kind {
        EnvName::Gp => Box::new(GpBasedEnv::new(g, world.truth.clone(), cfg.gp, cfg.fleet.noise_std, cfg.seed).map_err(|e| RunError::Scenario(e.to_string()))?),
        EnvName::Trash => Box::new(
            TrashCleanEnv::random(g, cfg.env.trash_items, cfg.env.vision_radius, cfg.seed)
                .map_err(|e| RunError::Scenario(e.to_string()))?,
        ),
        EnvName::Oil => Box::new(
            OilSpillEnv::new(g, world.truth.clone(), cfg.env.view_radius).map_err(|e| RunError::Scenario(e.to_string()))?,
        ),
    };
    Ok(env)
}

pub fn build_planner(cfg: &ScenarioConfig) -> Box<dyn Planner> {
    match cfg.planner.name {
        PlannerName::Greedy => Box::new(GreedyPlanner),
        PlannerName::Ei => Box::new(EiPlanner { xi: cfg.planner.xi }),
        PlannerName::Flooding => Box::new(FloodingPlanner::default()),
    }
}

fn fleet_config(cfg: &ScenarioConfig) -> FleetConfig {
    FleetConfig {
        n_vehicles: cfg.fleet.n_vehicles,
        initial_positions: cfg.fleet.initial_positions.clone(),
        max_distance: cfg.fleet.max_distance,
    }
}

fn limits(cfg: &ScenarioConfig) -> MissionLimits {
    MissionLimits {
        max_steps: cfg.fleet.max_steps,
    }
}

/// Everything a mission leaves behind, before it is written to disk.
pub struct Execution {
    pub outcome: MissionOutcome,
    pub hops: Vec<Hop>,
    pub traveled: Vec<f64>,
    pub elapsed: f64,
    pub belief_mean: Vec<f64>,
    pub belief_std: Vec<f64>,
    pub respawns: u32,
}

fn finish(outcome: MissionOutcome, fleet: &dyn Fleet, env: &dyn MonitoringEnv, respawns: u32) -> Execution {
    Execution {
        hops: fleet.hops().to_vec(),
        traveled: fleet.vehicles().iter().map(|v| v.traveled).collect(),
        elapsed: fleet.elapsed(),
        belief_mean: env.belief().mean.clone(),
        belief_std: env.belief().std.clone(),
        outcome,
        respawns,
    }
}

pub fn execute_local(cfg: &ScenarioConfig, world: &World) -> Result<Execution, RunError> {
    let sensor = SyntheticSensor::new(Arc::new(world.truth.clone()), cfg.fleet.noise_std, cfg.seed);
    let mut fleet = LocalFleet::new(world.graph.clone(), fleet_config(cfg), Box::new(sensor))
        .map_err(|e| RunError::Scenario(e.to_string()))?;
    let mut env = build_env(cfg, world)?;
    let mut planner = build_planner(cfg);
    let outcome = run_mission(&mut fleet, env.as_mut(), planner.as_mut(), limits(cfg))?;
    Ok(finish(outcome, &fleet, env.as_ref(), 0))
}

pub fn make_broker(cfg: &ScenarioConfig) -> Result<Arc<dyn Broker>, RunError> {
    match cfg.remote.broker {
        BrokerKind::Loopback => Ok(Arc::new(LoopbackBroker::new())),
        #[cfg(feature = "mqtt")]
        BrokerKind::Mqtt => {
            let mut b = ipp_remote::mqtt::MqttBroker::new(cfg.remote.host.clone(), cfg.remote.port);
            b.keep_alive = Duration::from_secs_f64(cfg.remote.keep_alive_s);
            Ok(Arc::new(b))
        }
        #[cfg(not(feature = "mqtt"))]
        BrokerKind::Mqtt => Err(RunError::Scenario("mqtt support is not compiled in".into())),
    }
}

pub fn spawn_backends(cfg: &ScenarioConfig, world: &World, broker: Arc<dyn Broker>) -> Result<BackendSet, RunError> {
    let field = Arc::new(world.truth.clone());
    let noise = cfg.fleet.noise_std;
    let seed = cfg.seed;
    let sensors: SensorFactory =
        Arc::new(move |v| Box::new(SyntheticSensor::new(field.clone(), noise, seed.wrapping_add(v as u64))) as _);
    BackendSet::spawn(
        broker,
        world.graph.clone(),
        cfg.remote.fleet.vehicle_ids.clone(),
        cfg.fleet.initial_positions.clone(),
        cfg.remote.backend.clone(),
        sensors,
        Duration::from_secs_f64(cfg.remote.startup_timeout_s),
    )
    .map_err(|e| RunError::Backends(e.to_string()))
}

/// Runs over a broker, spawning in-process backends unless configured otherwise.
pub fn execute_remote(
    cfg: &ScenarioConfig,
    world: &World,
    broker: Arc<dyn Broker>,
    trace: Option<Box<dyn Write + Send>>,
) -> Result<Execution, RunError> {
    let backends = if cfg.remote.spawn_backends {
        Some(Arc::new(spawn_backends(cfg, world, broker.clone())?))
    } else {
        None
    };
    let respawner = backends.clone().map(|b| b as Arc<dyn Respawner>);
    let trace = trace.map(|w| Arc::new(Mutex::new(TraceWriter::new(w))));
    let mut fleet = RemoteFleet::connect(
        world.graph.clone(),
        broker,
        fleet_config(cfg),
        cfg.remote.fleet.clone(),
        respawner,
        trace,
    )
    .map_err(|e| RunError::Backends(e.to_string()))?;
    let mut env = build_env(cfg, world)?;
    let mut planner = build_planner(cfg);
    let result = run_mission(&mut fleet, env.as_mut(), planner.as_mut(), limits(cfg));
    let respawns = backends.as_ref().map_or(0, |b| b.respawn_count());
    let exec = result.map(|outcome| finish(outcome, &fleet, env.as_ref(), respawns));
    fleet.close();
    if let Some(b) = backends {
        b.shutdown();
    }
    Ok(exec?)
}

/// `runs/{hash}-s{seed}` where the hash covers the normalized config.
pub fn run_dir_name(cfg: &ScenarioConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    let hex: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
    format!("{hex}-s{}", cfg.seed)
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), num)
}

/// One row per decision step; missing values are written as `NA`.
pub fn metrics_csv(rows: &[MetricsRecord], n_vehicles: usize) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "time_s".to_string()];
    header.extend((0..n_vehicles).map(|v| format!("traveled_{v}")));
    header.extend(["mse", "mean_std", "coverage", "objective"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for m in rows {
        let mut rec = vec![m.step.to_string(), num(m.time_s)];
        rec.extend(m.traveled.iter().map(|&t| num(t)));
        rec.extend([opt(m.mse), opt(m.mean_std), num(m.coverage), opt(m.objective)]);
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| RunError::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> RunError {
    RunError::Io(std::io::Error::other(e))
}

fn visits_csv(hops: &[Hop]) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["hop", "vehicle", "from", "to", "meters"]).map_err(csv_err)?;
    for (i, h) in hops.iter().enumerate() {
        w.write_record([
            i.to_string(),
            h.vehicle.to_string(),
            h.from.index().to_string(),
            h.to.index().to_string(),
            num(h.meters),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| RunError::Io(e.into_error()))
}

fn decisions_csv(out: &MissionOutcome) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "vehicle", "target"]).map_err(csv_err)?;
    for d in &out.decisions {
        w.write_record([d.step.to_string(), d.vehicle.to_string(), d.target.index().to_string()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| RunError::Io(e.into_error()))
}

fn metrics_json(m: &ModelMetrics) -> serde_json::Value {
    json!({ "mse": m.mse, "mean_std": m.mean_std, "coverage": m.coverage })
}

pub fn summary_json(cfg: &ScenarioConfig, exec: &Execution) -> serde_json::Value {
    let out = &exec.outcome;
    let last = out.final_metrics();
    json!({
        "seed": cfg.seed,
        "level": match cfg.level { Level::Local => "local", Level::Remote => "remote" },
        "planner": cfg.planner.name.as_str(),
        "mode": cfg.planner.mode.as_str(),
        "steps": out.steps,
        "decisions": out.decisions.len(),
        "hops": exec.hops.len(),
        "duration_s": exec.elapsed,
        "traveled": exec.traveled,
        "initial": metrics_json(&out.initial),
        "final": {
            "mse": last.and_then(|m| m.mse).or(out.initial.mse),
            "mean_std": last.and_then(|m| m.mean_std).or(out.initial.mean_std),
            "coverage": last.map_or(out.initial.coverage, |m| m.coverage),
            "objective": last.and_then(|m| m.objective),
        },
        "faults": out.faults.iter().map(|f| json!({"step": f.step, "vehicle": f.vehicle, "fault": f.fault.to_string()})).collect::<Vec<_>>(),
        "aborted": out.aborted.as_ref().map(|f| json!({"step": f.step, "vehicle": f.vehicle, "fault": f.fault.to_string()})),
        "respawns": exec.respawns,
    })
}

/// Writes every artifact of a finished (or aborted) mission into `dir`.
pub fn write_artifacts(cfg: &ScenarioConfig, world: &World, exec: &Execution, dir: &Path) -> Result<(), RunError> {
    fs::write(dir.join(METRICS_FILE), metrics_csv(&exec.outcome.metrics, cfg.fleet.n_vehicles)?)?;
    fs::write(dir.join("visits.csv"), visits_csv(&exec.hops)?)?;
    fs::write(dir.join("decisions.csv"), decisions_csv(&exec.outcome)?)?;
    let grid = |name: &str, v: &[f64]| -> Result<(), RunError> {
        let f = ScalarField::new(name, v.to_vec()).map_err(|e| RunError::Scenario(e.to_string()))?;
        fs::write(dir.join(format!("{name}.csv")), f.to_csv_grid(&world.graph))?;
        Ok(())
    };
    grid("posterior_mean", &exec.belief_mean)?;
    grid("posterior_std", &exec.belief_std)?;
    grid("ground_truth", world.truth.values())?;
    let summary = serde_json::to_string_pretty(&summary_json(cfg, exec)).expect("plain JSON");
    fs::write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}

pub struct RunReport {
    pub dir: PathBuf,
    pub execution: Execution,
}

impl RunReport {
    pub fn faulted(&self) -> bool {
        self.execution.outcome.aborted.is_some()
    }
}

/// Runs `cfg` into `out_root/{hash}-s{seed}`.
pub fn run(cfg: &ScenarioConfig, out_root: &Path) -> Result<RunReport, RunError> {
    let world = build_world(cfg)?;
    let dir = out_root.join(run_dir_name(cfg));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let exec = match cfg.level {
        Level::Local => execute_local(cfg, &world),
        Level::Remote => {
            let trace = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
            let broker = make_broker(cfg)?;
            execute_remote(cfg, &world, broker, Some(Box::new(trace)))
        }
    };
    let exec = match exec {
        Ok(e) => e,
        Err(e) => {
            let note = json!({ "error": e.to_string() });
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&note).expect("plain JSON") + "\n")?;
            return Err(e);
        }
    };
    write_artifacts(cfg, &world, &exec, &dir)?;
    Ok(RunReport { dir, execution: exec })
}

/// Re-derives the metrics table of a remote run from its wire trace.
pub fn replay(run_dir: &Path) -> Result<Vec<u8>, RunError> {
    let cfg = ScenarioConfig::load(&run_dir.join(CONFIG_FILE)).map_err(|e| RunError::Scenario(e.to_string()))?;
    let world = build_world(&cfg)?;
    let file = File::open(run_dir.join(TRACE_FILE))?;
    let collects = read_collects(BufReader::new(file)).map_err(|e| RunError::Trace(e.to_string()))?;
    let mut env = build_env(&cfg, &world)?;
    let mut rows = Vec::new();
    for c in &collects {
        env.assimilate(&c.measurements).map_err(|e| RunError::Trace(e.to_string()))?;
        if c.batch == 0 {
            continue;
        }
        let m = ipp_core::env::env_metrics(env.as_ref());
        rows.push(MetricsRecord {
            step: c.batch,
            time_s: c.t,
            traveled: c.traveled.clone(),
            mse: m.mse,
            mean_std: m.mean_std,
            coverage: m.coverage,
            objective: env.objective(),
        });
    }
    metrics_csv(&rows, cfg.fleet.n_vehicles)
}
