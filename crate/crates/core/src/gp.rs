//! Gaussian-process regression over graph nodes with a squared-exponential kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GridGraph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("at least one observation is required")]
    NoObservations,
    #[error("observation at {0} has a non-finite value")]
    NonFinite(NodeId),
    #[error("observation at {0} is not a graph node")]
    InvalidNode(NodeId),
    #[error("covariance is not positive definite even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// Kernel lengthscale in cells.
    pub lengthscale: f64,
    pub signal_std: f64,
    pub noise_std: f64,
}

impl Default for GpHyperparams {
    fn default() -> Self {
        Self {
            lengthscale: 3.0,
            signal_std: 1.0,
            noise_std: 0.01,
        }
    }
}

impl GpHyperparams {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(GpError::Hyperparams("lengthscale must be > 0".into()));
        }
        if !(self.signal_std > 0.0 && self.signal_std.is_finite()) {
            return Err(GpError::Hyperparams("signal_std must be > 0".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(GpError::Hyperparams("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub node: NodeId,
    pub value: f64,
}

/// `signal_std^2 * exp(-|a-b|^2 / (2 lengthscale^2))`
pub fn rbf_kernel(a: (f64, f64), b: (f64, f64), h: &GpHyperparams) -> f64 {
    let d2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
    h.signal_std * h.signal_std * (-d2 / (2.0 * h.lengthscale * h.lengthscale)).exp()
}

/// Predictive mean and standard deviation at every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GpPosterior {
    /// Zero mean and `std` everywhere.
    pub fn prior(n: usize, std: f64) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![std; n],
        }
    }

    pub fn mean_std(&self) -> f64 {
        self.std.iter().sum::<f64>() / self.std.len() as f64
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_GROWTH: f64 = 10.0;
const JITTER_MAX_REL: f64 = 1e-4;

/// A fitted model: Cholesky factor of `K + noise^2 I` over the observed cells.
#[derive(Debug, Clone)]
pub struct GpModel {
    h: GpHyperparams,
    coords: Vec<(f64, f64)>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn fit(obs: &[Observation], g: &GridGraph, h: GpHyperparams) -> Result<Self, GpError> {
        h.validate()?;
        if obs.is_empty() {
            return Err(GpError::NoObservations);
        }
        for o in obs {
            if !g.contains(o.node) {
                return Err(GpError::InvalidNode(o.node));
            }
            if !o.value.is_finite() {
                return Err(GpError::NonFinite(o.node));
            }
        }
        let coords: Vec<(f64, f64)> = obs.iter().map(|o| g.cell_coords(o.node)).collect();
        let n = coords.len();
        let noise_var = h.noise_std * h.noise_std;
        let mut k = DMatrix::from_fn(n, n, |i, j| rbf_kernel(coords[i], coords[j], &h));
        for i in 0..n {
            k[(i, i)] += noise_var;
        }

        let max_jitter = JITTER_MAX_REL * h.signal_std * h.signal_std;
        let mut jitter = 0.0;
        let chol = loop {
            let mut attempt = k.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    attempt[(i, i)] += jitter;
                }
            }
            if let Some(c) = Cholesky::new(attempt) {
                break c;
            }
            jitter = if jitter == 0.0 {
                JITTER_START
            } else {
                jitter * JITTER_GROWTH
            };
            if jitter > max_jitter * (1.0 + 1e-9) {
                return Err(GpError::IllConditioned {
                    jitter: jitter / JITTER_GROWTH,
                });
            }
        };
        let y = DVector::from_iterator(n, obs.iter().map(|o| o.value));
        let alpha = chol.solve(&y);
        Ok(Self {
            h,
            coords,
            chol,
            alpha,
            jitter,
        })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.h
    }

    /// Diagonal jitter that had to be added for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n_observations(&self) -> usize {
        self.coords.len()
    }

    pub fn posterior(&self, g: &GridGraph) -> GpPosterior {
        let queries: Vec<(f64, f64)> = g.nodes().map(|n| g.cell_coords(n)).collect();
        let (mean, std) = self.predict(&queries);
        GpPosterior { mean, std }
    }

    /// Latent mean and standard deviation at arbitrary cell coordinates.
    pub fn predict(&self, queries: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
        let n = self.coords.len();
        let m = queries.len();
        let k_star = DMatrix::from_fn(n, m, |i, j| rbf_kernel(self.coords[i], queries[j], &self.h));
        let mean = k_star.transpose() * &self.alpha;
        let l = self.chol.l();
        let v = l
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor has a positive diagonal");
        let prior_var = self.h.signal_std * self.h.signal_std;
        let std = (0..m)
            .map(|j| {
                let explained: f64 = v.column(j).iter().map(|x| x * x).sum();
                (prior_var - explained).max(0.0).sqrt()
            })
            .collect();
        (mean.iter().copied().collect(), std)
    }
}

/// Fits `obs` and returns the posterior, or the prior when there are no observations.
pub fn posterior_or_prior(
    obs: &[Observation],
    g: &GridGraph,
    h: GpHyperparams,
) -> Result<GpPosterior, GpError> {
    if obs.is_empty() {
        h.validate()?;
        return Ok(GpPosterior::prior(g.node_count(), h.signal_std));
    }
    Ok(GpModel::fit(obs, g, h)?.posterior(g))
}
