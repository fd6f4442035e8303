//! The canonical mission loop: plan, move until reached or done, measure,
//! update the model, record metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{env_metrics, Measurement, EnvError, MetricsRecord, ModelMetrics, MonitoringEnv};
use crate::fleet::{Fault, Fleet, FleetError};
use crate::graph::NodeId;
use crate::planner::{PlanContext, Planner};

#[derive(Debug, Error)]
pub enum MissionError {
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("planner returned {got} targets for {expected} vehicles")]
    DecisionShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissionLimits {
    /// Upper bound on decision steps; missions without a budget need one.
    pub max_steps: usize,
}

impl Default for MissionLimits {
    fn default() -> Self {
        Self { max_steps: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub step: usize,
    pub vehicle: usize,
    pub target: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleFault {
    pub step: usize,
    pub vehicle: usize,
    pub fault: Fault,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionOutcome {
    pub decisions: Vec<DecisionRecord>,
    pub metrics: Vec<MetricsRecord>,
    /// Metrics of the untouched prior, before any measurement.
    pub initial: ModelMetrics,
    /// Non-fatal vehicle faults, such as unreachable targets.
    pub faults: Vec<VehicleFault>,
    /// Set when the mission stopped on a fatal fault; artifacts are partial.
    pub aborted: Option<VehicleFault>,
    pub steps: usize,
}

impl MissionOutcome {
    pub fn final_metrics(&self) -> Option<&MetricsRecord> {
        self.metrics.last()
    }
}

fn record<F: Fleet + ?Sized>(step: usize, fleet: &F, env: &dyn MonitoringEnv) -> MetricsRecord {
    let m = env_metrics(env);
    MetricsRecord {
        step,
        time_s: fleet.elapsed(),
        traveled: fleet.vehicles().iter().map(|v| v.traveled).collect(),
        mse: m.mse,
        mean_std: m.mean_std,
        coverage: m.coverage,
        objective: env.objective(),
    }
}

/// A vehicle fault while measuring aborts the mission instead of failing it.
fn measure<F: Fleet + ?Sized>(
    fleet: &mut F,
    step: usize,
    out: &mut MissionOutcome,
) -> Result<Option<Vec<Measurement>>, MissionError> {
    match fleet.take_measurement() {
        Ok(b) => Ok(Some(b)),
        Err(FleetError::Vehicle { vehicle, fault }) => {
            out.aborted = Some(VehicleFault {
                step,
                vehicle,
                fault,
            });
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Runs until every vehicle is done or `limits.max_steps` decisions were made.
pub fn run_mission<F: Fleet + ?Sized>(
    fleet: &mut F,
    env: &mut dyn MonitoringEnv,
    planner: &mut dyn Planner,
    limits: MissionLimits,
) -> Result<MissionOutcome, MissionError> {
    let initial = env_metrics(env);
    let mut out = MissionOutcome {
        decisions: Vec::new(),
        metrics: Vec::new(),
        initial,
        faults: Vec::new(),
        aborted: None,
        steps: 0,
    };
    let first = match measure(fleet, 0, &mut out)? {
        Some(b) => b,
        None => return Ok(out),
    };
    env.assimilate(&first)?;

    let n = fleet.vehicles().len();
    let mut step = 0;
    while step < limits.max_steps && !fleet.all_done() {
        let views = fleet.views();
        let decision = planner.decide(&PlanContext {
            graph: env.graph(),
            belief: env.belief(),
            best_observed: env.best_observed(),
            vehicles: &views,
        });
        if decision.targets.len() != n {
            return Err(MissionError::DecisionShape {
                expected: n,
                got: decision.targets.len(),
            });
        }
        let mut targets = decision.targets;
        for (t, v) in targets.iter_mut().zip(&views) {
            if v.done {
                *t = None;
            }
        }
        // Nobody leaves their node: every later step would repeat this one.
        let stalled = targets.iter().zip(&views).all(|(t, v)| t.is_none_or(|t| t == v.position));
        for (i, t) in targets.iter().enumerate() {
            match *t {
                Some(_) if stalled => fleet.mark_done(i),
                Some(target) => out.decisions.push(DecisionRecord {
                    step,
                    vehicle: i,
                    target,
                }),
                None if !views[i].done => fleet.mark_done(i),
                None => {}
            }
        }
        if stalled {
            break;
        }

        loop {
            let moved = fleet.move_to(&targets)?;
            for (i, fault) in moved.faults.iter().enumerate() {
                let Some(fault) = fault else { continue };
                if targets[i].is_none() {
                    continue;
                }
                let vf = VehicleFault {
                    step,
                    vehicle: i,
                    fault: fault.clone(),
                };
                targets[i] = None;
                if fault.is_fatal() {
                    out.aborted = Some(vf);
                } else {
                    out.faults.push(vf);
                }
            }
            if out.aborted.is_some() {
                break;
            }
            for (i, t) in targets.iter_mut().enumerate() {
                if moved.reached[i] || moved.dones[i] {
                    *t = None;
                }
            }
            if targets.iter().all(Option::is_none) {
                break;
            }
        }
        if out.aborted.is_some() {
            break;
        }

        let Some(batch) = measure(fleet, step, &mut out)? else {
            break;
        };
        env.assimilate(&batch)?;
        step += 1;
        out.metrics.push(record(step, &*fleet, env));
    }
    out.steps = step;
    Ok(out)
}
