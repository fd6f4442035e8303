//! Decision strategies. Every planner is a deterministic function of its
//! inputs; flooding additionally owns a progress cursor per vehicle.

use serde::{Deserialize, Serialize};

use crate::gp::GpPosterior;
use crate::graph::{GridGraph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One adjacent hop per decision, model refit after every hop.
    Sequential,
    /// Distant targets, model refit once every vehicle has arrived.
    Target,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sequential => "sequential",
            Mode::Target => "target",
        }
    }
}

/// Per-vehicle targets; `None` means the vehicle has nothing left to do.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerDecision {
    pub mode: Mode,
    pub targets: Vec<Option<NodeId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    /// Exploration margin, `>= 0`.
    pub xi: f64,
    pub f_best: f64,
}

/// What a planner may know about one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleView {
    pub position: NodeId,
    /// Meters left before the distance budget; `None` when unlimited.
    pub remaining: Option<f64>,
    pub done: bool,
}

pub struct PlanContext<'a> {
    pub graph: &'a GridGraph,
    pub belief: &'a GpPosterior,
    pub best_observed: Option<f64>,
    pub vehicles: &'a [VehicleView],
}

pub trait Planner {
    fn name(&self) -> &'static str;
    fn mode(&self) -> Mode;
    fn decide(&mut self, ctx: &PlanContext<'_>) -> PlannerDecision;
}

/// Highest-σ neighbour per vehicle, vehicles claiming in ascending index.
pub fn greedy_next(belief: &GpPosterior, g: &GridGraph, current: &[NodeId]) -> PlannerDecision {
    let mut claimed: Vec<NodeId> = Vec::with_capacity(current.len());
    let targets = current
        .iter()
        .map(|&pos| {
            let mut best: Option<NodeId> = None;
            for &(n, _) in g.edges(pos) {
                if claimed.contains(&n) {
                    continue;
                }
                // Edges are sorted by id, so strict `>` keeps the lowest id on ties.
                if best.is_none_or(|b| belief.std[n.index()] > belief.std[b.index()]) {
                    best = Some(n);
                }
            }
            let target = best.unwrap_or(pos);
            claimed.push(target);
            Some(target)
        })
        .collect();
    PlannerDecision {
        mode: Mode::Sequential,
        targets,
    }
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement of `N(mu, sigma^2)` over `f_best + xi`.
pub fn ei_value(mu: f64, sigma: f64, p: &AcquisitionParams) -> f64 {
    let imp = mu - p.f_best - p.xi;
    if sigma <= 0.0 {
        return imp.max(0.0);
    }
    let z = imp / sigma;
    (imp * norm_cdf(z) + sigma * norm_pdf(z)).max(0.0)
}

/// Per vehicle, the highest-EI node it can afford, excluding its own position
/// and nodes claimed by lower-indexed vehicles. Ties go to the lowest id.
pub fn ei_next(
    belief: &GpPosterior,
    g: &GridGraph,
    vehicles: &[VehicleView],
    p: &AcquisitionParams,
) -> PlannerDecision {
    let side = g.cell_side();
    let mut claimed: Vec<NodeId> = Vec::new();
    let targets = vehicles
        .iter()
        .map(|v| {
            if v.done {
                return None;
            }
            let costs = g.costs_from(v.position).expect("vehicle position is a node");
            let mut best: Option<(NodeId, f64)> = None;
            for n in g.nodes() {
                if n == v.position || claimed.contains(&n) {
                    continue;
                }
                let Some(cost) = costs[n.index()] else { continue };
                if v.remaining.is_some_and(|r| cost.meters(side) > r) {
                    continue;
                }
                let score = ei_value(belief.mean[n.index()], belief.std[n.index()], p);
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some((n, score));
                }
            }
            let target = best.map(|(n, _)| n);
            if let Some(t) = target {
                claimed.push(t);
            }
            target
        })
        .collect();
    PlannerDecision {
        mode: Mode::Target,
        targets,
    }
}

/// Boustrophedon sweep of the nodes reachable from `start`.
///
/// Rows are visited from the start row downwards, then from the row above it
/// upwards. Direction alternates per non-empty row; the first row runs away
/// from whichever end is nearer the start. The list begins with `start`.
pub fn lawnmower_order(g: &GridGraph, start: NodeId) -> Vec<NodeId> {
    let reachable = g.reachable_from(start).expect("start is a node");
    let mut by_row: Vec<Vec<NodeId>> = vec![Vec::new(); g.rows()];
    for n in reachable {
        by_row[g.cell(n).0].push(n);
    }
    let (r0, c0) = g.cell(start);
    let first = &by_row[r0];
    let left = g.cell(first[0]).1;
    let right = g.cell(*first.last().expect("start row holds start")).1;
    let mut left_to_right = c0 - left <= right - c0;

    let rows = (r0..g.rows()).chain((0..r0).rev());
    let mut order = vec![start];
    for r in rows {
        let row = &by_row[r];
        if row.is_empty() {
            continue;
        }
        let sweep: Box<dyn Iterator<Item = &NodeId>> = if left_to_right {
            Box::new(row.iter())
        } else {
            Box::new(row.iter().rev())
        };
        order.extend(sweep.filter(|&&n| n != start));
        left_to_right = !left_to_right;
    }
    order
}

/// Contiguous equal split of `len` items over `k` segments.
pub fn segment_bounds(len: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i * len / k, (i + 1) * len / k)).collect()
}

/// A lawnmower order partitioned into one segment per vehicle, with cursors.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodingPlan {
    pub order: Vec<NodeId>,
    segments: Vec<(usize, usize)>,
    cursors: Vec<usize>,
}

impl FloodingPlan {
    pub fn new(order: Vec<NodeId>, n_vehicles: usize) -> Self {
        let segments = segment_bounds(order.len(), n_vehicles.max(1));
        let cursors = segments.iter().map(|s| s.0).collect();
        Self {
            order,
            segments,
            cursors,
        }
    }

    pub fn segment(&self, vehicle: usize) -> &[NodeId] {
        let (a, b) = self.segments[vehicle];
        &self.order[a..b]
    }

    /// Next node of the vehicle's segment, skipping its current position.
    /// `None` once the segment is exhausted.
    pub fn next(&mut self, vehicle: usize, current: NodeId) -> Option<NodeId> {
        let end = self.segments[vehicle].1;
        let cursor = &mut self.cursors[vehicle];
        while *cursor < end {
            let n = self.order[*cursor];
            *cursor += 1;
            if n != current {
                return Some(n);
            }
        }
        None
    }
}

pub fn flooding_next(plan: &mut FloodingPlan, vehicles: &[VehicleView]) -> PlannerDecision {
    let targets = vehicles
        .iter()
        .enumerate()
        .map(|(i, v)| if v.done { None } else { plan.next(i, v.position) })
        .collect();
    PlannerDecision {
        mode: Mode::Target,
        targets,
    }
}

#[derive(Debug, Clone, Default)]
pub struct GreedyPlanner;

impl Planner for GreedyPlanner {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn mode(&self) -> Mode {
        Mode::Sequential
    }

    fn decide(&mut self, ctx: &PlanContext<'_>) -> PlannerDecision {
        let current: Vec<NodeId> = ctx.vehicles.iter().map(|v| v.position).collect();
        let mut d = greedy_next(ctx.belief, ctx.graph, &current);
        for (t, v) in d.targets.iter_mut().zip(ctx.vehicles) {
            if v.done {
                *t = None;
            }
        }
        d
    }
}

#[derive(Debug, Clone)]
pub struct EiPlanner {
    pub xi: f64,
}

impl Default for EiPlanner {
    fn default() -> Self {
        Self { xi: 0.01 }
    }
}

impl Planner for EiPlanner {
    fn name(&self) -> &'static str {
        "ei"
    }

    fn mode(&self) -> Mode {
        Mode::Target
    }

    fn decide(&mut self, ctx: &PlanContext<'_>) -> PlannerDecision {
        let p = AcquisitionParams {
            xi: self.xi,
            f_best: ctx.best_observed.unwrap_or(0.0),
        };
        ei_next(ctx.belief, ctx.graph, ctx.vehicles, &p)
    }
}

/// Builds its sweep from vehicle 0's position on the first decision.
#[derive(Debug, Clone, Default)]
pub struct FloodingPlanner {
    plan: Option<FloodingPlan>,
}

impl FloodingPlanner {
    pub fn plan(&self) -> Option<&FloodingPlan> {
        self.plan.as_ref()
    }
}

impl Planner for FloodingPlanner {
    fn name(&self) -> &'static str {
        "flooding"
    }

    fn mode(&self) -> Mode {
        Mode::Target
    }

    fn decide(&mut self, ctx: &PlanContext<'_>) -> PlannerDecision {
        let plan = self.plan.get_or_insert_with(|| {
            let order = lawnmower_order(ctx.graph, ctx.vehicles[0].position);
            FloodingPlan::new(order, ctx.vehicles.len())
        });
        flooding_next(plan, ctx.vehicles)
    }
}
