//! Mission environments layered on the grid graph, plus per-step metrics.
//!
//! Every environment exposes a belief (per-node mean and uncertainty) that
//! planners consume, and assimilates the measurements a fleet collects.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{self, ScalarField};
use crate::gp::{posterior_or_prior, GpError, GpHyperparams, GpPosterior, Observation};
use crate::graph::{GridGraph, NodeId};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("node {0} does not exist")]
    InvalidNode(NodeId),
    #[error("ground truth has {got} values for {expected} nodes")]
    TruthLength { expected: usize, got: usize },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Field(#[from] field::FieldError),
}

/// One sensor reading taken by one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub vehicle: usize,
    pub node: NodeId,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Gp,
    Trash,
    Oil,
}

/// Shared surface of every mission environment.
pub trait MonitoringEnv {
    fn kind(&self) -> EnvKind;
    fn graph(&self) -> &GridGraph;
    /// Folds a batch of measurements into the environment's state.
    fn assimilate(&mut self, batch: &[Measurement]) -> Result<(), EnvError>;
    /// Per-node mean and uncertainty planners decide on.
    fn belief(&self) -> &GpPosterior;
    /// Scalar ground truth the belief mean is scored against, when one exists.
    fn ground_truth(&self) -> Option<&ScalarField>;
    /// Best value seen so far, used as the improvement baseline.
    fn best_observed(&self) -> Option<f64>;
    /// Environment-specific headline number (items collected, area revealed).
    fn objective(&self) -> Option<f64> {
        None
    }
    /// Nodes where at least one measurement has been taken.
    fn visited(&self) -> &[bool];
}

fn check_node(g: &GridGraph, n: NodeId) -> Result<(), EnvError> {
    if g.contains(n) {
        Ok(())
    } else {
        Err(EnvError::InvalidNode(n))
    }
}

/// Builds a GP model of a scalar field from point samples.
pub struct GpBasedEnv {
    graph: Arc<GridGraph>,
    truth: ScalarField,
    log: Vec<Observation>,
    hyper: GpHyperparams,
    noise_std: f64,
    rng: ChaCha8Rng,
    posterior: GpPosterior,
    visited: Vec<bool>,
}

impl GpBasedEnv {
    pub fn new(
        graph: Arc<GridGraph>,
        truth: ScalarField,
        hyper: GpHyperparams,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self, EnvError> {
        hyper.validate()?;
        if truth.len() != graph.node_count() {
            return Err(EnvError::TruthLength {
                expected: graph.node_count(),
                got: truth.len(),
            });
        }
        let n = graph.node_count();
        Ok(Self {
            posterior: GpPosterior::prior(n, hyper.signal_std),
            visited: vec![false; n],
            graph,
            truth,
            log: Vec::new(),
            hyper,
            noise_std,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.log
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    /// Samples the ground truth at each visit, logs the samples and refits.
    pub fn observe(&mut self, visits: &[(usize, NodeId)]) -> Result<Vec<Observation>, EnvError> {
        let mut batch = Vec::with_capacity(visits.len());
        for &(vehicle, node) in visits {
            check_node(&self.graph, node)?;
            let value = field::sample(&self.truth, node, self.noise_std, &mut self.rng)?;
            batch.push(Measurement {
                vehicle,
                node,
                value,
            });
        }
        self.assimilate(&batch)?;
        Ok(batch
            .iter()
            .map(|m| Observation {
                node: m.node,
                value: m.value,
            })
            .collect())
    }
}

impl MonitoringEnv for GpBasedEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Gp
    }

    fn graph(&self) -> &GridGraph {
        &self.graph
    }

    fn assimilate(&mut self, batch: &[Measurement]) -> Result<(), EnvError> {
        if batch.is_empty() {
            return Ok(());
        }
        for m in batch {
            check_node(&self.graph, m.node)?;
        }
        let before = self.log.len();
        self.log.extend(batch.iter().map(|m| Observation {
            node: m.node,
            value: m.value,
        }));
        match posterior_or_prior(&self.log, &self.graph, self.hyper) {
            Ok(p) => {
                self.posterior = p;
                for m in batch {
                    self.visited[m.node.index()] = true;
                }
                Ok(())
            }
            Err(e) => {
                self.log.truncate(before);
                Err(e.into())
            }
        }
    }

    fn belief(&self) -> &GpPosterior {
        &self.posterior
    }

    fn ground_truth(&self) -> Option<&ScalarField> {
        Some(&self.truth)
    }

    fn best_observed(&self) -> Option<f64> {
        self.log.iter().map(|o| o.value).reduce(f64::max)
    }

    fn visited(&self) -> &[bool] {
        &self.visited
    }
}

/// Floating-debris collection. Items sit on nodes; vehicles see items within
/// `vision_radius` and pick up everything on the node they visit.
pub struct TrashCleanEnv {
    graph: Arc<GridGraph>,
    initial_total: u32,
    remaining: Vec<u32>,
    known: Vec<bool>,
    vision_radius: f64,
    collected: u32,
    belief: GpPosterior,
    visited: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrashStep {
    /// Nodes that entered the detection map this step, with their item counts.
    pub detected: Vec<(NodeId, u32)>,
    pub collected: u32,
}

impl TrashCleanEnv {
    pub fn new(graph: Arc<GridGraph>, trash: &[NodeId], vision_radius: f64) -> Result<Self, EnvError> {
        let n = graph.node_count();
        let mut remaining = vec![0u32; n];
        for &t in trash {
            check_node(&graph, t)?;
            remaining[t.index()] += 1;
        }
        let mut env = Self {
            initial_total: trash.len() as u32,
            remaining,
            known: vec![false; n],
            vision_radius,
            collected: 0,
            belief: GpPosterior::prior(n, 1.0),
            visited: vec![false; n],
            graph,
        };
        env.refresh_belief();
        Ok(env)
    }

    /// `n_items` placed uniformly over nodes; several may share a node.
    pub fn random(
        graph: Arc<GridGraph>,
        n_items: usize,
        vision_radius: f64,
        seed: u64,
    ) -> Result<Self, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = graph.node_count();
        let trash: Vec<NodeId> = (0..n_items).map(|_| NodeId(rng.random_range(0..n))).collect();
        Self::new(graph, &trash, vision_radius)
    }

    pub fn step(&mut self, visits: &[(usize, NodeId)]) -> Result<TrashStep, EnvError> {
        for &(_, node) in visits {
            check_node(&self.graph, node)?;
        }
        let mut out = TrashStep::default();
        for &(_, node) in visits {
            for seen in self.graph.within_radius(node, self.vision_radius) {
                if !self.known[seen.index()] {
                    self.known[seen.index()] = true;
                    if self.remaining[seen.index()] > 0 {
                        out.detected.push((seen, self.remaining[seen.index()]));
                    }
                }
            }
        }
        for &(_, node) in visits {
            let here = &mut self.remaining[node.index()];
            out.collected += *here;
            self.collected += *here;
            *here = 0;
            self.visited[node.index()] = true;
        }
        out.detected.sort_by_key(|(n, _)| *n);
        self.refresh_belief();
        Ok(out)
    }

    fn refresh_belief(&mut self) {
        for i in 0..self.remaining.len() {
            let known = self.known[i];
            self.belief.mean[i] = if known { self.remaining[i] as f64 } else { 0.0 };
            self.belief.std[i] = if known { 0.0 } else { 1.0 };
        }
    }

    pub fn initial_total(&self) -> u32 {
        self.initial_total
    }

    pub fn collected(&self) -> u32 {
        self.collected
    }

    /// Items seen at some point and still floating.
    pub fn detected_uncollected(&self) -> u32 {
        self.sum_where(true)
    }

    pub fn undiscovered(&self) -> u32 {
        self.sum_where(false)
    }

    fn sum_where(&self, known: bool) -> u32 {
        self.remaining
            .iter()
            .zip(&self.known)
            .filter(|(_, &k)| k == known)
            .map(|(r, _)| *r)
            .sum()
    }

    pub fn is_known(&self, n: NodeId) -> bool {
        self.known[n.index()]
    }

    pub fn remaining_at(&self, n: NodeId) -> u32 {
        self.remaining[n.index()]
    }
}

impl MonitoringEnv for TrashCleanEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Trash
    }

    fn graph(&self) -> &GridGraph {
        &self.graph
    }

    fn assimilate(&mut self, batch: &[Measurement]) -> Result<(), EnvError> {
        let visits: Vec<(usize, NodeId)> = batch.iter().map(|m| (m.vehicle, m.node)).collect();
        self.step(&visits).map(|_| ())
    }

    fn belief(&self) -> &GpPosterior {
        &self.belief
    }

    fn ground_truth(&self) -> Option<&ScalarField> {
        None
    }

    fn best_observed(&self) -> Option<f64> {
        self.known
            .iter()
            .zip(&self.remaining)
            .filter(|(k, _)| **k)
            .map(|(_, r)| *r as f64)
            .reduce(f64::max)
    }

    fn objective(&self) -> Option<f64> {
        Some(self.collected as f64)
    }

    fn visited(&self) -> &[bool] {
        &self.visited
    }
}

/// Oil-spill delimitation: every node within `view_radius` of a vehicle is
/// revealed exactly.
pub struct OilSpillEnv {
    graph: Arc<GridGraph>,
    truth: ScalarField,
    revealed: Vec<Option<f64>>,
    view_radius: f64,
    belief: GpPosterior,
    visited: Vec<bool>,
}

impl OilSpillEnv {
    pub fn new(graph: Arc<GridGraph>, truth: ScalarField, view_radius: f64) -> Result<Self, EnvError> {
        let n = graph.node_count();
        if truth.len() != n {
            return Err(EnvError::TruthLength {
                expected: n,
                got: truth.len(),
            });
        }
        Ok(Self {
            graph,
            truth,
            revealed: vec![None; n],
            view_radius,
            belief: GpPosterior::prior(n, 1.0),
            visited: vec![false; n],
        })
    }

    pub fn observe(&mut self, visits: &[(usize, NodeId)]) -> Result<&[Option<f64>], EnvError> {
        for &(_, node) in visits {
            check_node(&self.graph, node)?;
        }
        for &(_, node) in visits {
            self.visited[node.index()] = true;
            for seen in self.graph.within_radius(node, self.view_radius) {
                let v = self.truth.values()[seen.index()];
                self.revealed[seen.index()] = Some(v);
                self.belief.mean[seen.index()] = v;
                self.belief.std[seen.index()] = 0.0;
            }
        }
        Ok(&self.revealed)
    }

    /// Per-node knowledge: `None` until seen.
    pub fn belief_map(&self) -> &[Option<f64>] {
        &self.revealed
    }

    pub fn revealed_fraction(&self) -> f64 {
        self.revealed.iter().filter(|v| v.is_some()).count() as f64 / self.revealed.len() as f64
    }
}

impl MonitoringEnv for OilSpillEnv {
    fn kind(&self) -> EnvKind {
        EnvKind::Oil
    }

    fn graph(&self) -> &GridGraph {
        &self.graph
    }

    fn assimilate(&mut self, batch: &[Measurement]) -> Result<(), EnvError> {
        let visits: Vec<(usize, NodeId)> = batch.iter().map(|m| (m.vehicle, m.node)).collect();
        self.observe(&visits).map(|_| ())
    }

    fn belief(&self) -> &GpPosterior {
        &self.belief
    }

    fn ground_truth(&self) -> Option<&ScalarField> {
        Some(&self.truth)
    }

    fn best_observed(&self) -> Option<f64> {
        self.revealed.iter().flatten().copied().reduce(f64::max)
    }

    fn objective(&self) -> Option<f64> {
        Some(self.revealed_fraction())
    }

    fn visited(&self) -> &[bool] {
        &self.visited
    }
}

/// Metrics for one decision step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Simulated mission time in seconds.
    pub time_s: f64,
    pub traveled: Vec<f64>,
    /// `None` when no ground truth is available.
    pub mse: Option<f64>,
    pub mean_std: Option<f64>,
    pub coverage: f64,
    pub objective: Option<f64>,
}

/// Model-quality numbers derived from an estimate and the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelMetrics {
    pub mse: Option<f64>,
    pub mean_std: Option<f64>,
    pub coverage: f64,
}

/// MSE of the estimate mean against the truth over all navigable nodes,
/// mean posterior std, and the fraction of nodes visited.
pub fn compute_metrics(
    truth: Option<&ScalarField>,
    estimate: Option<&GpPosterior>,
    visited: &[bool],
) -> ModelMetrics {
    let mse = match (truth, estimate) {
        (Some(t), Some(e)) => {
            let n = t.len() as f64;
            Some(
                t.values()
                    .iter()
                    .zip(&e.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / n,
            )
        }
        _ => None,
    };
    let coverage = if visited.is_empty() {
        0.0
    } else {
        visited.iter().filter(|&&v| v).count() as f64 / visited.len() as f64
    };
    ModelMetrics {
        mse,
        mean_std: estimate.map(GpPosterior::mean_std),
        coverage,
    }
}

/// Snapshot of an environment's metrics.
pub fn env_metrics(env: &dyn MonitoringEnv) -> ModelMetrics {
    compute_metrics(env.ground_truth(), Some(env.belief()), env.visited())
}
