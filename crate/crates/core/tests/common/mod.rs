#![allow(dead_code)]

use ipp_core::graph::{GridGraph, OccupancyMask};
use rand::Rng;

/// Neighbour lists built straight from the mask, ids row-major over true cells.
/// Diagonals need both orthogonal cells open. Weights are (orth, diag) counts.
pub fn mask_adjacency(mask: &OccupancyMask) -> Vec<Vec<(usize, (u32, u32))>> {
    let (rows, cols) = (mask.rows(), mask.cols());
    let mut id = vec![None; rows * cols];
    let mut next = 0;
    for r in 0..rows {
        for c in 0..cols {
            if mask.get(r, c) {
                id[r * cols + c] = Some(next);
                next += 1;
            }
        }
    }
    let open = |r: i64, c: i64| {
        r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols && mask.get(r as usize, c as usize)
    };
    let mut adj = vec![Vec::new(); next];
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            if !open(r, c) {
                continue;
            }
            let me = id[r as usize * cols + c as usize].unwrap();
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if (dr, dc) == (0, 0) || !open(r + dr, c + dc) {
                        continue;
                    }
                    let diag = dr != 0 && dc != 0;
                    if diag && !(open(r + dr, c) && open(r, c + dc)) {
                        continue;
                    }
                    let other = id[(r + dr) as usize * cols + (c + dc) as usize].unwrap();
                    adj[me].push((other, if diag { (0, 1) } else { (1, 0) }));
                }
            }
            adj[me].sort();
        }
    }
    adj
}

/// Orders `orth + diag*sqrt2` lengths. For the small counts involved distinct
/// lengths differ by far more than float error, so plain f64 is exact enough.
pub fn cmp_cost(a: (u32, u32), b: (u32, u32)) -> std::cmp::Ordering {
    if a == b {
        return std::cmp::Ordering::Equal;
    }
    let len = |c: (u32, u32)| c.0 as f64 + c.1 as f64 * std::f64::consts::SQRT_2;
    len(a).partial_cmp(&len(b)).unwrap()
}

/// Minimum over all simple paths, found by depth-first enumeration in
/// ascending-neighbour order with pruning on `>=`. The first path attaining
/// the minimum is therefore the lexicographically smallest one.
pub fn brute_force_path(
    adj: &[Vec<(usize, (u32, u32))>],
    from: usize,
    to: usize,
) -> Option<((u32, u32), Vec<usize>)> {
    struct Search<'a> {
        adj: &'a [Vec<(usize, (u32, u32))>],
        to: usize,
        on_path: Vec<bool>,
        path: Vec<usize>,
        best: Option<((u32, u32), Vec<usize>)>,
    }
    fn dfs(s: &mut Search<'_>, u: usize, cost: (u32, u32)) {
        if let Some((b, _)) = &s.best {
            if cmp_cost(cost, *b) != std::cmp::Ordering::Less {
                return;
            }
        }
        if u == s.to {
            s.best = Some((cost, s.path.clone()));
            return;
        }
        for i in 0..s.adj[u].len() {
            let (v, w) = s.adj[u][i];
            if s.on_path[v] {
                continue;
            }
            s.on_path[v] = true;
            s.path.push(v);
            dfs(s, v, (cost.0 + w.0, cost.1 + w.1));
            s.path.pop();
            s.on_path[v] = false;
        }
    }
    let mut s = Search {
        adj,
        to,
        on_path: vec![false; adj.len()],
        path: vec![from],
        best: None,
    };
    s.on_path[from] = true;
    dfs(&mut s, from, (0, 0));
    s.best
}

pub fn random_mask(rng: &mut impl Rng, rows: usize, cols: usize, p_open: f64) -> OccupancyMask {
    loop {
        let cells: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(p_open)).collect();
        if cells.iter().any(|&c| c) {
            return OccupancyMask::new(rows, cols, cells).unwrap();
        }
    }
}

/// Random mask whose graph is connected.
pub fn random_connected(rng: &mut impl Rng, rows: usize, cols: usize, p_open: f64) -> GridGraph {
    loop {
        let g = GridGraph::from_mask(random_mask(rng, rows, cols, p_open), 5.0).unwrap();
        if g.is_connected() {
            return g;
        }
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap())
            .unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            let pivot = a[k].clone();
            for (x, p) in a[i][k..].iter_mut().zip(&pivot[k..]) {
                *x -= f * p;
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Posterior mean and variance at `q` from the textbook formulas.
pub fn dense_gp(
    xs: &[(f64, f64)],
    ys: &[f64],
    q: (f64, f64),
    lengthscale: f64,
    signal_std: f64,
    noise_std: f64,
) -> (f64, f64) {
    let k = |a: (f64, f64), b: (f64, f64)| {
        let d2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        signal_std.powi(2) * (-d2 / (2.0 * lengthscale.powi(2))).exp()
    };
    let n = xs.len();
    let kmat: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| k(xs[i], xs[j]) + if i == j { noise_std.powi(2) } else { 0.0 })
                .collect()
        })
        .collect();
    let kstar: Vec<f64> = xs.iter().map(|&x| k(x, q)).collect();
    let alpha = dense_solve(kmat.clone(), ys.to_vec());
    let v = dense_solve(kmat, kstar.clone());
    let mean = kstar.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let var = signal_std.powi(2) - kstar.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (mean, var)
}
