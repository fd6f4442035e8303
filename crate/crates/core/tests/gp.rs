mod common;

use common::dense_gp;
use ipp_core::gp::{GpHyperparams, GpModel, Observation};
use ipp_core::graph::{GridGraph, NodeId, OccupancyMask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(rows: usize, cols: usize) -> GridGraph {
    GridGraph::from_mask(OccupancyMask::from_fn(rows, cols, |_, _| true).unwrap(), 5.0).unwrap()
}

#[test]
fn noise_free_interpolation() {
    let g = grid(6, 6);
    let h = GpHyperparams {
        noise_std: 0.0,
        ..GpHyperparams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obs: Vec<Observation> = [0, 7, 14, 21, 35, 3, 30]
        .iter()
        .map(|&i| Observation {
            node: NodeId(i),
            value: rng.random_range(-1.0..1.0),
        })
        .collect();
    let post = GpModel::fit(&obs, &g, h).unwrap().posterior(&g);
    for o in &obs {
        assert!((post.mean[o.node.0] - o.value).abs() < 1e-6);
    }
}

#[test]
fn two_observations_closed_form() {
    let g = grid(4, 5);
    let h = GpHyperparams {
        lengthscale: 1.7,
        signal_std: 0.8,
        noise_std: 0.05,
    };
    let (n1, n2, y1, y2) = (NodeId(1), NodeId(13), 0.4, -0.25);
    let obs = [Observation { node: n1, value: y1 }, Observation { node: n2, value: y2 }];
    let post = GpModel::fit(&obs, &g, h).unwrap().posterior(&g);

    let sf2 = h.signal_std * h.signal_std;
    let k = |a: NodeId, b: NodeId| {
        let (p, q) = (g.cell_coords(a), g.cell_coords(b));
        let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
        sf2 * (-d2 / (2.0 * h.lengthscale * h.lengthscale)).exp()
    };
    let a = sf2 + h.noise_std * h.noise_std;
    let b = k(n1, n2);
    let det = a * a - b * b;
    for q in g.nodes() {
        let (k1, k2) = (k(n1, q), k(n2, q));
        let mean = (k1 * (a * y1 - b * y2) + k2 * (a * y2 - b * y1)) / det;
        let var = sf2 - (a * (k1 * k1 + k2 * k2) - 2.0 * b * k1 * k2) / det;
        assert!((post.mean[q.0] - mean).abs() < 1e-9);
        assert!((post.std[q.0] - var.max(0.0).sqrt()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_dense_solver(seed in any::<u64>(), n_obs in 1usize..12) {
        let g = grid(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = GpHyperparams {
            lengthscale: rng.random_range(0.8..4.0),
            signal_std: rng.random_range(0.5..2.0),
            noise_std: rng.random_range(0.05..0.3),
        };
        let obs: Vec<Observation> = (0..n_obs)
            .map(|_| Observation {
                node: NodeId(rng.random_range(0..g.node_count())),
                value: rng.random_range(-2.0..2.0),
            })
            .collect();
        let post = GpModel::fit(&obs, &g, h).unwrap().posterior(&g);
        let xs: Vec<(f64, f64)> = obs.iter().map(|o| g.cell_coords(o.node)).collect();
        let ys: Vec<f64> = obs.iter().map(|o| o.value).collect();
        for q in g.nodes() {
            let (m, v) = dense_gp(&xs, &ys, g.cell_coords(q), h.lengthscale, h.signal_std, h.noise_std);
            prop_assert!((post.mean[q.0] - m).abs() < 1e-8);
            prop_assert!((post.std[q.0] - v.max(0.0).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn permutation_invariant(seed in any::<u64>()) {
        let g = grid(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut obs: Vec<Observation> = (0..6)
            .map(|_| Observation {
                node: NodeId(rng.random_range(0..16)),
                value: rng.random_range(0.0..1.0),
            })
            .collect();
        let h = GpHyperparams::default();
        let a = GpModel::fit(&obs, &g, h).unwrap().posterior(&g);
        obs.reverse();
        obs.swap(0, 3);
        let b = GpModel::fit(&obs, &g, h).unwrap().posterior(&g);
        for i in 0..16 {
            prop_assert!((a.mean[i] - b.mean[i]).abs() < 1e-9);
            prop_assert!((a.std[i] - b.std[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn std_never_grows_with_more_data(seed in any::<u64>()) {
        let g = grid(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = GpHyperparams::default();
        let mut obs = Vec::new();
        let mut prev = vec![h.signal_std; g.node_count()];
        for _ in 0..8 {
            obs.push(Observation {
                node: NodeId(rng.random_range(0..36)),
                value: rng.random_range(0.0..1.0),
            });
            let post = GpModel::fit(&obs, &g, h).unwrap().posterior(&g);
            for (s, p) in post.std.iter().zip(&prev) {
                prop_assert!(*s <= p + 1e-9);
                prop_assert!(*s >= 0.0);
            }
            prev = post.std;
        }
    }
}
