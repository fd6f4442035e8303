//! Scenario files.
//!
//! A scenario is one TOML document. Loading resolves every default and
//! returns either a complete [`ScenarioConfig`] or the full list of problems,
//! each tagged with its dotted field path. [`ScenarioConfig::to_toml`] echoes
//! the normalized form, which loads back to the same config.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ipp_core::field::FieldSpec;
use ipp_core::gp::GpHyperparams;
use ipp_core::graph::{sample_lake_mask, BoundingBox, GeoReference, GridGraph, NodeId, OccupancyMask};
use ipp_core::planner::Mode;
use ipp_remote::backend::{BackendConfig, Pacing};
use ipp_remote::fleet::{default_vehicle_ids, RemoteFleetConfig};
use ipp_remote::wire::valid_vehicle_id;
use thiserror::Error;
use toml::{Table, Value};

pub const BUILTIN_LAKE: &str = "builtin:lake";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("{path}: {reason}")]
    Syntax { path: String, reason: String },
    #[error("{}", render(.0))]
    Invalid(Vec<ConfigIssue>),
}

fn render(issues: &[ConfigIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

impl ConfigError {
    pub fn issues(&self) -> Vec<ConfigIssue> {
        match self {
            ConfigError::Invalid(v) => v.clone(),
            ConfigError::Read { path, reason } | ConfigError::Syntax { path, reason } => vec![ConfigIssue {
                path: path.clone(),
                message: reason.clone(),
            }],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvName {
    Gp,
    Trash,
    Oil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerName {
    Greedy,
    Ei,
    Flooding,
}

impl PlannerName {
    pub fn as_str(self) -> &'static str {
        match self {
            PlannerName::Greedy => "greedy",
            PlannerName::Ei => "ei",
            PlannerName::Flooding => "flooding",
        }
    }

    /// Each planner has exactly one operational mode.
    pub fn mode(self) -> Mode {
        match self {
            PlannerName::Greedy => Mode::Sequential,
            PlannerName::Ei | PlannerName::Flooding => Mode::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    BuiltinLake,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TruthSource {
    Synthetic(FieldSpec),
    External(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub mask: MaskSource,
    pub cell_area: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvName,
    pub trash_items: usize,
    pub vision_radius: f64,
    pub view_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub name: PlannerName,
    pub mode: Mode,
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSection {
    pub n_vehicles: usize,
    pub initial_positions: Vec<NodeId>,
    pub max_distance: Option<f64>,
    /// Sensor noise, field units.
    pub noise_std: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrokerKind {
    Loopback,
    Mqtt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteSection {
    pub broker: BrokerKind,
    pub host: String,
    pub port: u16,
    pub keep_alive_s: f64,
    pub spawn_backends: bool,
    pub startup_timeout_s: f64,
    pub fleet: RemoteFleetConfig,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub level: Level,
    pub map: MapConfig,
    pub truth: TruthSource,
    pub env: EnvConfig,
    pub planner: PlannerConfig,
    pub fleet: FleetSection,
    pub gp: GpHyperparams,
    pub remote: RemoteSection,
}

const ROOT_KEYS: &[&str] = &["seed", "level", "map", "truth", "env", "planner", "fleet", "gp", "remote"];

struct Reader {
    issues: Vec<ConfigIssue>,
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn as_f64(v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(f) if f.is_finite() => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err("expected a finite number".into()),
    }
}

fn as_u64(v: &Value) -> Result<u64, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err("expected a non-negative integer".into()),
    }
}

fn as_usize(v: &Value) -> Result<usize, String> {
    as_u64(v).and_then(|n| usize::try_from(n).map_err(|_| "out of range".into()))
}

fn as_string(v: &Value) -> Result<String, String> {
    v.as_str().map(str::to_owned).ok_or_else(|| "expected a string".into())
}

fn as_bool(v: &Value) -> Result<bool, String> {
    v.as_bool().ok_or_else(|| "expected a boolean".into())
}

fn as_pair(v: &Value) -> Result<(f64, f64), String> {
    match v.as_array().map(Vec::as_slice) {
        Some([a, b]) => Ok((as_f64(a)?, as_f64(b)?)),
        _ => Err("expected [min, max]".into()),
    }
}

fn as_list<T>(v: &Value, item: fn(&Value) -> Result<T, String>) -> Result<Vec<T>, String> {
    v.as_array()
        .ok_or_else(|| "expected an array".to_string())?
        .iter()
        .enumerate()
        .map(|(i, x)| item(x).map_err(|e| format!("item {i}: {e}")))
        .collect()
}

impl Reader {
    fn issue(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ConfigIssue {
            path: path.into(),
            message: message.into(),
        });
    }

    /// Sub-table `key` of `t`, empty when absent. Unknown keys are reported.
    fn section(&mut self, t: &Table, prefix: &str, key: &str, allowed: &[&str]) -> Table {
        let path = join(prefix, key);
        let table = match t.get(key) {
            None => Table::new(),
            Some(Value::Table(s)) => s.clone(),
            Some(_) => {
                self.issue(&path, "expected a table");
                Table::new()
            }
        };
        self.unknown(&table, &path, allowed);
        table
    }

    fn unknown(&mut self, t: &Table, prefix: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.issue(join(prefix, k), "unknown field");
            }
        }
    }

    fn opt<T>(&mut self, t: &Table, prefix: &str, key: &str, parse: impl Fn(&Value) -> Result<T, String>) -> Option<T> {
        let v = t.get(key)?;
        match parse(v) {
            Ok(x) => Some(x),
            Err(e) => {
                self.issue(join(prefix, key), e);
                None
            }
        }
    }

    fn or<T>(&mut self, t: &Table, prefix: &str, key: &str, default: T, parse: impl Fn(&Value) -> Result<T, String>) -> T {
        self.opt(t, prefix, key, parse).unwrap_or(default)
    }

    fn check(&mut self, ok: bool, path: &str, message: &str) {
        if !ok {
            self.issue(path, message);
        }
    }

    fn choice<T: Copy>(&mut self, t: &Table, prefix: &str, key: &str, default: T, options: &[(&str, T)]) -> T {
        let Some(s) = self.opt(t, prefix, key, as_string) else {
            return default;
        };
        match options.iter().find(|(name, _)| *name == s) {
            Some((_, v)) => *v,
            None => {
                let names: Vec<&str> = options.iter().map(|o| o.0).collect();
                self.issue(join(prefix, key), format!("`{s}` is not one of {}", names.join(", ")));
                default
            }
        }
    }
}

/// Budget as written in a scenario: a number of meters or `"unlimited"`.
fn as_budget(v: &Value) -> Result<Option<f64>, String> {
    match v {
        Value::String(s) if s == "unlimited" => Ok(None),
        _ => as_f64(v)
            .map(Some)
            .map_err(|_| "expected meters or \"unlimited\"".into()),
    }
}

fn as_fail_after(v: &Value) -> Result<Option<u64>, String> {
    match v {
        Value::String(s) if s == "never" => Ok(None),
        _ => as_u64(v)
            .map(Some)
            .map_err(|_| "expected a count or \"never\"".into()),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    joined.canonicalize().unwrap_or(joined)
}

/// Lays the mask out near the origin with square cells of `side` meters.
fn default_bbox(mask: &OccupancyMask, cell_area: f64) -> BoundingBox {
    let probe = OccupancyMask::from_fn(mask.rows(), mask.cols(), |_, _| true).expect("non-empty");
    let b = GridGraph::from_mask(probe, cell_area.sqrt())
        .expect("full mask builds")
        .bounds();
    // Round-off residue at the origin would otherwise be echoed as 1e-20.
    let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
    BoundingBox {
        lat_min: snap(b.lat_min),
        lat_max: snap(b.lat_max),
        lon_min: snap(b.lon_min),
        lon_max: snap(b.lon_max),
    }
}

/// The `n` nodes closest to the centroid of the navigable cells, nearest first.
pub fn centroid_starts(g: &GridGraph, n: usize) -> Vec<NodeId> {
    let count = g.node_count() as f64;
    let (sr, sc) = g.nodes().fold((0.0, 0.0), |acc, v| {
        let (r, c) = g.cell_coords(v);
        (acc.0 + r, acc.1 + c)
    });
    let (cr, cc) = (sr / count, sc / count);
    let mut nodes: Vec<(f64, NodeId)> = g
        .nodes()
        .map(|v| {
            let (r, c) = g.cell_coords(v);
            ((r - cr).powi(2) + (c - cc).powi(2), v)
        })
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    nodes.into_iter().take(n).map(|x| x.1).collect()
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, &base)
    }

    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            path: "<document>".into(),
            reason: e.message().to_string(),
        })?;
        let mut r = Reader { issues: Vec::new() };
        r.unknown(&root, "", ROOT_KEYS);

        let seed = r.opt(&root, "", "seed", as_u64);
        if !root.contains_key("seed") {
            r.issue("seed", "required; runs are never seeded from the clock");
        }
        let seed_or_zero = seed.unwrap_or(0);
        let level = r.choice(&root, "", "level", Level::Local, &[("local", Level::Local), ("remote", Level::Remote)]);

        // Map and graph come first: node-valued defaults depend on them.
        let m = r.section(&root, "", "map", &["mask", "cell_area", "bbox"]);
        let mask_text = r.or(&m, "map", "mask", BUILTIN_LAKE.to_string(), as_string);
        let (mask_src, mask) = if mask_text == BUILTIN_LAKE {
            (MaskSource::BuiltinLake, Some(sample_lake_mask()))
        } else {
            let p = resolve(base, &mask_text);
            match OccupancyMask::load(&p) {
                Ok(mask) => (MaskSource::File(p), Some(mask)),
                Err(e) => {
                    r.issue("map.mask", e.to_string());
                    (MaskSource::File(p), None)
                }
            }
        };
        let cell_area = r.or(&m, "map", "cell_area", 25.0, as_f64);
        r.check(cell_area > 0.0, "map.cell_area", "must be > 0");
        let bbox = match (&mask, m.get("bbox")) {
            (_, Some(_)) => {
                let b = r.section(&m, "map", "bbox", &["lat_min", "lat_max", "lon_min", "lon_max"]);
                let mut get = |k: &str| {
                    let v = r.opt(&b, "map.bbox", k, as_f64);
                    if v.is_none() && !b.contains_key(k) {
                        r.issue(join("map.bbox", k), "required when a bounding box is given");
                    }
                    v.unwrap_or(0.0)
                };
                let bbox = BoundingBox {
                    lat_min: get("lat_min"),
                    lat_max: get("lat_max"),
                    lon_min: get("lon_min"),
                    lon_max: get("lon_max"),
                };
                r.check(bbox.lat_min < bbox.lat_max, "map.bbox", "lat_min must be < lat_max");
                r.check(bbox.lon_min < bbox.lon_max, "map.bbox", "lon_min must be < lon_max");
                Some(bbox)
            }
            (Some(mask), None) if cell_area > 0.0 => Some(default_bbox(mask, cell_area)),
            _ => None,
        };
        let graph = match (&mask, bbox) {
            (Some(mask), Some(bbox)) if cell_area > 0.0 => {
                match GeoReference::from_bounding_box(mask.rows(), mask.cols(), bbox, cell_area)
                    .and_then(|geo| GridGraph::build(mask.clone(), geo))
                {
                    Ok(g) => Some(g),
                    Err(e) => {
                        r.issue("map", e.to_string());
                        None
                    }
                }
            }
            _ => None,
        };

        let t = r.section(
            &root,
            "",
            "truth",
            &["source", "path", "seed", "n_peaks", "peak_width_range", "amplitude_range", "normalize"],
        );
        let source = r.choice(&t, "truth", "source", "synthetic", &[("synthetic", "synthetic"), ("external", "external")]);
        let truth = if source == "external" {
            for k in ["seed", "n_peaks", "peak_width_range", "amplitude_range", "normalize"] {
                if t.contains_key(k) {
                    r.issue(join("truth", k), "only valid for synthetic fields");
                }
            }
            match r.opt(&t, "truth", "path", as_string) {
                Some(p) => {
                    let p = resolve(base, &p);
                    if !p.is_file() {
                        r.issue("truth.path", format!("{} does not exist", p.display()));
                    }
                    TruthSource::External(p)
                }
                None => {
                    if !t.contains_key("path") {
                        r.issue("truth.path", "required for external maps");
                    }
                    TruthSource::External(PathBuf::new())
                }
            }
        } else {
            if t.contains_key("path") {
                r.issue("truth.path", "only valid for external maps");
            }
            let d = FieldSpec::default();
            let spec = FieldSpec {
                seed: r.or(&t, "truth", "seed", seed_or_zero, as_u64),
                n_peaks: r.or(&t, "truth", "n_peaks", d.n_peaks, as_usize),
                peak_width_range: r.or(&t, "truth", "peak_width_range", d.peak_width_range, as_pair),
                amplitude_range: r.or(&t, "truth", "amplitude_range", d.amplitude_range, as_pair),
                normalize: r.or(&t, "truth", "normalize", d.normalize, as_bool),
            };
            if let Err(e) = spec.validate() {
                r.issue("truth", e.to_string());
            }
            TruthSource::Synthetic(spec)
        };

        let e = r.section(&root, "", "env", &["kind", "trash_items", "vision_radius", "view_radius"]);
        let env = EnvConfig {
            kind: r.choice(&e, "env", "kind", EnvName::Gp, &[("gp", EnvName::Gp), ("trash", EnvName::Trash), ("oil", EnvName::Oil)]),
            trash_items: r.or(&e, "env", "trash_items", 20, as_usize),
            vision_radius: r.or(&e, "env", "vision_radius", 10.0, as_f64),
            view_radius: r.or(&e, "env", "view_radius", 10.0, as_f64),
        };
        r.check(env.vision_radius >= 0.0, "env.vision_radius", "must be >= 0");
        r.check(env.view_radius >= 0.0, "env.view_radius", "must be >= 0");

        let p = r.section(&root, "", "planner", &["name", "mode", "xi"]);
        let name = r.choice(
            &p,
            "planner",
            "name",
            PlannerName::Greedy,
            &[("greedy", PlannerName::Greedy), ("ei", PlannerName::Ei), ("flooding", PlannerName::Flooding)],
        );
        let mode = r.choice(&p, "planner", "mode", name.mode(), &[("sequential", Mode::Sequential), ("target", Mode::Target)]);
        if mode != name.mode() {
            r.issue(
                "planner.mode",
                format!("{} runs in {} mode only", name.as_str(), name.mode().as_str()),
            );
        }
        let xi = r.or(&p, "planner", "xi", 0.01, as_f64);
        r.check(xi >= 0.0, "planner.xi", "must be >= 0");
        if name != PlannerName::Ei && p.contains_key("xi") {
            r.issue("planner.xi", "only valid for the ei planner");
        }

        let f = r.section(&root, "", "fleet", &["n_vehicles", "initial_positions", "max_distance", "noise_std", "max_steps"]);
        let n_vehicles = r.or(&f, "fleet", "n_vehicles", 1, as_usize);
        r.check(n_vehicles >= 1, "fleet.n_vehicles", "must be >= 1");
        let initial_positions = match r.opt(&f, "fleet", "initial_positions", |v| as_list(v, as_usize)) {
            Some(list) => {
                if list.len() != n_vehicles {
                    r.issue(
                        "fleet.initial_positions",
                        format!("{} positions for {n_vehicles} vehicles", list.len()),
                    );
                }
                if let Some(g) = &graph {
                    for (i, &n) in list.iter().enumerate() {
                        if n >= g.node_count() {
                            r.issue(
                                format!("fleet.initial_positions[{i}]"),
                                format!("node {n} does not exist (graph has {} nodes)", g.node_count()),
                            );
                        }
                    }
                }
                list.into_iter().map(NodeId).collect()
            }
            None => match &graph {
                Some(g) if n_vehicles <= g.node_count() => centroid_starts(g, n_vehicles),
                Some(_) => {
                    r.issue("fleet.n_vehicles", "more vehicles than navigable cells");
                    Vec::new()
                }
                None => Vec::new(),
            },
        };
        let max_distance = r.or(&f, "fleet", "max_distance", Some(925.0), as_budget);
        if let Some(d) = max_distance {
            r.check(d >= 0.0, "fleet.max_distance", "must be >= 0");
        }
        let noise_std = r.or(&f, "fleet", "noise_std", 0.0, as_f64);
        r.check(noise_std >= 0.0, "fleet.noise_std", "must be >= 0");
        let max_steps = r.or(&f, "fleet", "max_steps", 10_000, as_usize);
        r.check(max_steps >= 1, "fleet.max_steps", "must be >= 1");

        let gs = r.section(&root, "", "gp", &["lengthscale", "signal_std", "noise_std"]);
        let dg = GpHyperparams::default();
        let gp = GpHyperparams {
            lengthscale: r.or(&gs, "gp", "lengthscale", dg.lengthscale, as_f64),
            signal_std: r.or(&gs, "gp", "signal_std", dg.signal_std, as_f64),
            noise_std: r.or(&gs, "gp", "noise_std", dg.noise_std, as_f64),
        };
        if let Err(e) = gp.validate() {
            r.issue("gp", e.to_string());
        }

        let rs = r.section(
            &root,
            "",
            "remote",
            &[
                "broker",
                "host",
                "port",
                "keep_alive_s",
                "vehicle_ids",
                "spawn_backends",
                "startup_timeout_s",
                "timeout_scale",
                "ack_timeout_base_s",
                "ack_timeout_factor",
                "measurement_timeout_s",
                "max_retries",
                "backend",
            ],
        );
        let broker = r.choice(&rs, "remote", "broker", BrokerKind::Loopback, &[("loopback", BrokerKind::Loopback), ("mqtt", BrokerKind::Mqtt)]);
        if broker == BrokerKind::Mqtt && level == Level::Remote && !cfg!(feature = "mqtt") {
            r.issue("remote.broker", "mqtt support is not compiled in (build with --features mqtt)");
        }
        let host = r.or(&rs, "remote", "host", "localhost".to_string(), as_string);
        let port = r.or(&rs, "remote", "port", 1883u64, as_u64);
        r.check((1..=65535).contains(&port), "remote.port", "must be in 1..=65535");
        let keep_alive_s = r.or(&rs, "remote", "keep_alive_s", 5.0, as_f64);
        r.check(keep_alive_s > 0.0, "remote.keep_alive_s", "must be > 0");
        let ids = r.or(&rs, "remote", "vehicle_ids", default_vehicle_ids(n_vehicles), |v| as_list(v, as_string));
        if ids.len() != n_vehicles {
            r.issue("remote.vehicle_ids", format!("{} ids for {n_vehicles} vehicles", ids.len()));
        }
        let mut seen = BTreeSet::new();
        for (i, id) in ids.iter().enumerate() {
            if !valid_vehicle_id(id) {
                r.issue(format!("remote.vehicle_ids[{i}]"), "empty or contains topic separators");
            }
            if !seen.insert(id) {
                r.issue(format!("remote.vehicle_ids[{i}]"), format!("duplicate id `{id}`"));
            }
        }
        let spawn_backends = r.or(&rs, "remote", "spawn_backends", true, as_bool);
        if broker == BrokerKind::Loopback && !spawn_backends {
            r.issue("remote.spawn_backends", "a loopback broker needs in-process backends");
        }
        let startup_timeout_s = r.or(&rs, "remote", "startup_timeout_s", 10.0, as_f64);
        r.check(startup_timeout_s > 0.0, "remote.startup_timeout_s", "must be > 0");

        let b = r.section(
            &rs,
            "remote",
            "backend",
            &[
                "tick_dt",
                "reach_tolerance",
                "gps_noise_std",
                "speed_limit",
                "state_period_s",
                "waypoint_latency_s",
                "pacing",
                "speedup",
                "fail_after_measurements",
                "parameter",
            ],
        );
        let db = BackendConfig::default();
        let side = cell_area.max(0.0).sqrt();
        let realtime = r.choice(&b, "remote.backend", "pacing", false, &[("logical", false), ("realtime", true)]);
        let speedup = r.or(&b, "remote.backend", "speedup", 1.0, as_f64);
        if b.contains_key("speedup") && !realtime {
            r.issue("remote.backend.speedup", "only valid with realtime pacing");
        }
        let backend = BackendConfig {
            tick_dt: r.or(&b, "remote.backend", "tick_dt", db.tick_dt, as_f64),
            reach_tolerance: Some(r.or(&b, "remote.backend", "reach_tolerance", 0.2 * side, as_f64)),
            gps_noise_std: r.or(&b, "remote.backend", "gps_noise_std", db.gps_noise_std, as_f64),
            speed_limit: r.or(&b, "remote.backend", "speed_limit", db.speed_limit, as_f64),
            state_period_s: r.or(&b, "remote.backend", "state_period_s", db.state_period_s, as_f64),
            waypoint_latency_s: r.or(&b, "remote.backend", "waypoint_latency_s", db.waypoint_latency_s, as_f64),
            fail_after_measurements: r.or(&b, "remote.backend", "fail_after_measurements", None, as_fail_after),
            pacing: if realtime { Pacing::RealTime { speedup } } else { Pacing::Logical },
            parameter: r.or(&b, "remote.backend", "parameter", db.parameter.clone(), as_string),
            seed: seed_or_zero,
        };
        if let Err(e) = backend.validate() {
            r.issue("remote.backend", e.to_string());
        }
        let df = RemoteFleetConfig::new(Vec::new());
        let fleet_remote = RemoteFleetConfig {
            vehicle_ids: ids,
            speed_limit: backend.speed_limit,
            ack_timeout_base_s: r.or(&rs, "remote", "ack_timeout_base_s", df.ack_timeout_base_s, as_f64),
            ack_timeout_factor: r.or(&rs, "remote", "ack_timeout_factor", df.ack_timeout_factor, as_f64),
            // Logical backends outrun the wall clock by far.
            timeout_scale: r.or(&rs, "remote", "timeout_scale", if realtime { 1.0 / speedup.max(1e-9) } else { 0.05 }, as_f64),
            measurement_timeout_s: r.or(&rs, "remote", "measurement_timeout_s", df.measurement_timeout_s, as_f64),
            max_retries: r.or(&rs, "remote", "max_retries", df.max_retries as u64, as_u64).min(u32::MAX as u64) as u32,
        };
        for (k, v) in [
            ("ack_timeout_base_s", fleet_remote.ack_timeout_base_s),
            ("ack_timeout_factor", fleet_remote.ack_timeout_factor),
            ("timeout_scale", fleet_remote.timeout_scale),
            ("measurement_timeout_s", fleet_remote.measurement_timeout_s),
        ] {
            r.check(v > 0.0, &join("remote", k), "must be > 0");
        }

        if !r.issues.is_empty() {
            return Err(ConfigError::Invalid(r.issues));
        }
        Ok(Self {
            seed: seed.expect("checked"),
            level,
            map: MapConfig {
                mask: mask_src,
                cell_area,
                bbox: bbox.expect("checked"),
            },
            truth,
            env,
            planner: PlannerConfig { name, mode, xi },
            fleet: FleetSection {
                n_vehicles,
                initial_positions,
                max_distance,
                noise_std,
                max_steps,
            },
            gp,
            remote: RemoteSection {
                broker,
                host,
                port: port as u16,
                keep_alive_s,
                spawn_backends,
                startup_timeout_s,
                fleet: fleet_remote,
                backend,
            },
        })
    }

    pub fn mask(&self) -> Result<OccupancyMask, String> {
        match &self.map.mask {
            MaskSource::BuiltinLake => Ok(sample_lake_mask()),
            MaskSource::File(p) => OccupancyMask::load(p).map_err(|e| e.to_string()),
        }
    }

    pub fn graph(&self) -> Result<Arc<GridGraph>, String> {
        let mask = self.mask()?;
        let geo = GeoReference::from_bounding_box(mask.rows(), mask.cols(), self.map.bbox, self.map.cell_area)
            .map_err(|e| e.to_string())?;
        GridGraph::build(mask, geo).map(Arc::new).map_err(|e| e.to_string())
    }

    /// Complete normalized form; loading it yields `self` again.
    pub fn to_toml(&self) -> String {
        fn table(pairs: Vec<(&str, Value)>) -> Value {
            Value::Table(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
        }
        let f = Value::Float;
        let int = |n: u64| Value::Integer(n as i64);
        let s = |x: &str| Value::String(x.to_string());
        let path = |p: &Path| Value::String(p.display().to_string());

        let mask = match &self.map.mask {
            MaskSource::BuiltinLake => s(BUILTIN_LAKE),
            MaskSource::File(p) => path(p),
        };
        let truth = match &self.truth {
            TruthSource::Synthetic(spec) => table(vec![
                ("source", s("synthetic")),
                ("seed", int(spec.seed)),
                ("n_peaks", int(spec.n_peaks as u64)),
                ("peak_width_range", Value::Array(vec![f(spec.peak_width_range.0), f(spec.peak_width_range.1)])),
                ("amplitude_range", Value::Array(vec![f(spec.amplitude_range.0), f(spec.amplitude_range.1)])),
                ("normalize", Value::Boolean(spec.normalize)),
            ]),
            TruthSource::External(p) => table(vec![("source", s("external")), ("path", path(p))]),
        };
        let env = table(vec![
            (
                "kind",
                s(match self.env.kind {
                    EnvName::Gp => "gp",
                    EnvName::Trash => "trash",
                    EnvName::Oil => "oil",
                }),
            ),
            ("trash_items", int(self.env.trash_items as u64)),
            ("vision_radius", f(self.env.vision_radius)),
            ("view_radius", f(self.env.view_radius)),
        ]);
        let mut planner = vec![("name", s(self.planner.name.as_str())), ("mode", s(self.planner.mode.as_str()))];
        if self.planner.name == PlannerName::Ei {
            planner.push(("xi", f(self.planner.xi)));
        }
        let fleet = table(vec![
            ("n_vehicles", int(self.fleet.n_vehicles as u64)),
            (
                "initial_positions",
                Value::Array(self.fleet.initial_positions.iter().map(|n| int(n.index() as u64)).collect()),
            ),
            ("max_distance", self.fleet.max_distance.map_or_else(|| s("unlimited"), f)),
            ("noise_std", f(self.fleet.noise_std)),
            ("max_steps", int(self.fleet.max_steps as u64)),
        ]);
        let b = &self.remote.backend;
        let mut backend = vec![
            ("tick_dt", f(b.tick_dt)),
            ("reach_tolerance", f(b.reach_tolerance.expect("normalized"))),
            ("gps_noise_std", f(b.gps_noise_std)),
            ("speed_limit", f(b.speed_limit)),
            ("state_period_s", f(b.state_period_s)),
            ("waypoint_latency_s", f(b.waypoint_latency_s)),
        ];
        match b.pacing {
            Pacing::Logical => backend.push(("pacing", s("logical"))),
            Pacing::RealTime { speedup } => {
                backend.push(("pacing", s("realtime")));
                backend.push(("speedup", f(speedup)));
            }
        }
        backend.push(("fail_after_measurements", b.fail_after_measurements.map_or_else(|| s("never"), int)));
        backend.push(("parameter", s(&b.parameter)));
        let rf = &self.remote.fleet;
        let remote = table(vec![
            (
                "broker",
                s(match self.remote.broker {
                    BrokerKind::Loopback => "loopback",
                    BrokerKind::Mqtt => "mqtt",
                }),
            ),
            ("host", s(&self.remote.host)),
            ("port", int(self.remote.port as u64)),
            ("keep_alive_s", f(self.remote.keep_alive_s)),
            ("vehicle_ids", Value::Array(rf.vehicle_ids.iter().map(|x| s(x)).collect())),
            ("spawn_backends", Value::Boolean(self.remote.spawn_backends)),
            ("startup_timeout_s", f(self.remote.startup_timeout_s)),
            ("timeout_scale", f(rf.timeout_scale)),
            ("ack_timeout_base_s", f(rf.ack_timeout_base_s)),
            ("ack_timeout_factor", f(rf.ack_timeout_factor)),
            ("measurement_timeout_s", f(rf.measurement_timeout_s)),
            ("max_retries", int(rf.max_retries as u64)),
            ("backend", table(backend)),
        ]);
        let bb = self.map.bbox;
        let root = table(vec![
            ("seed", int(self.seed)),
            (
                "level",
                s(match self.level {
                    Level::Local => "local",
                    Level::Remote => "remote",
                }),
            ),
            (
                "map",
                table(vec![
                    ("mask", mask),
                    ("cell_area", f(self.map.cell_area)),
                    (
                        "bbox",
                        table(vec![
                            ("lat_min", f(bb.lat_min)),
                            ("lat_max", f(bb.lat_max)),
                            ("lon_min", f(bb.lon_min)),
                            ("lon_max", f(bb.lon_max)),
                        ]),
                    ),
                ]),
            ),
            ("truth", truth),
            ("env", env),
            ("planner", table(planner)),
            ("fleet", fleet),
            (
                "gp",
                table(vec![
                    ("lengthscale", f(self.gp.lengthscale)),
                    ("signal_std", f(self.gp.signal_std)),
                    ("noise_std", f(self.gp.noise_std)),
                ]),
            ),
            ("remote", remote),
        ]);
        toml::to_string(&root).expect("plain tables serialize")
    }
}
