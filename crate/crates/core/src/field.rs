//! Ground-truth scalar fields: seeded synthetic generation, external map
//! ingestion and noisy point sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GridGraph, NodeId};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field spec: {0}")]
    Spec(String),
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("map is {map_rows}x{map_cols}, smaller than the {grid_rows}x{grid_cols} grid")]
    Resolution {
        map_rows: usize,
        map_cols: usize,
        grid_rows: usize,
        grid_cols: usize,
    },
    #[error("map cell ({row}, {col}) is empty or not a finite number")]
    MissingValue { row: usize, col: usize },
    #[error("node {0} does not exist")]
    InvalidNode(NodeId),
    #[error("field has {got} values, graph has {expected} nodes")]
    Length { expected: usize, got: usize },
}

/// One value per graph node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub name: String,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self, FieldError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::Spec(format!("value at node {i} is not finite")));
        }
        Ok(Self {
            name: name.into(),
            values,
        })
    }

    pub fn constant(name: impl Into<String>, n: usize, value: f64) -> Self {
        Self {
            name: name.into(),
            values: vec![value; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, n: NodeId) -> Result<f64, FieldError> {
        self.values
            .get(n.index())
            .copied()
            .ok_or(FieldError::InvalidNode(n))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Writes the field as a CSV grid over the full mask; blocked cells are left empty.
    pub fn to_csv_grid(&self, g: &GridGraph) -> String {
        let mut out = String::new();
        for r in 0..g.rows() {
            let row: Vec<String> = (0..g.cols())
                .map(|c| match g.node_at(r, c) {
                    Some(n) => format!("{}", self.values[n.index()]),
                    None => String::new(),
                })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Recipe for a seeded sum-of-Gaussians field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub seed: u64,
    pub n_peaks: usize,
    /// Peak standard deviation range, in cells.
    pub peak_width_range: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub normalize: bool,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_peaks: 4,
            peak_width_range: (3.0, 8.0),
            amplitude_range: (0.5, 1.0),
            normalize: true,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.n_peaks == 0 {
            return Err(FieldError::Spec("n_peaks must be at least 1".into()));
        }
        for (name, (lo, hi)) in [
            ("peak_width_range", self.peak_width_range),
            ("amplitude_range", self.amplitude_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(FieldError::Spec(format!(
                    "{name} must satisfy 0 < min <= max, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Isotropic Gaussian bump in cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBump {
    pub center: (f64, f64),
    pub width: f64,
    pub amplitude: f64,
}

impl GaussianBump {
    pub fn at(&self, p: (f64, f64)) -> f64 {
        let d2 = (p.0 - self.center.0).powi(2) + (p.1 - self.center.1).powi(2);
        self.amplitude * (-d2 / (2.0 * self.width * self.width)).exp()
    }
}

pub fn field_from_bumps(
    g: &GridGraph,
    name: &str,
    bumps: &[GaussianBump],
    normalize: bool,
) -> ScalarField {
    let mut values: Vec<f64> = g
        .nodes()
        .map(|n| {
            let p = g.cell_coords(n);
            bumps.iter().map(|b| b.at(p)).sum()
        })
        .collect();
    if normalize {
        normalize_unit(&mut values);
    }
    ScalarField {
        name: name.to_string(),
        values,
    }
}

fn normalize_unit(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else if hi > 0.0 {
        values.iter_mut().for_each(|v| *v /= hi);
    }
}

pub fn generate_field(g: &GridGraph, spec: &FieldSpec) -> Result<ScalarField, FieldError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bumps: Vec<GaussianBump> = (0..spec.n_peaks)
        .map(|_| {
            let center = g.cell_coords(NodeId(rng.random_range(0..g.node_count())));
            let width = draw(&mut rng, spec.peak_width_range);
            let amplitude = draw(&mut rng, spec.amplitude_range);
            GaussianBump {
                center,
                width,
                amplitude,
            }
        })
        .collect();
    Ok(field_from_bumps(g, "ground_truth", &bumps, spec.normalize))
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Loads a CSV grid or a greyscale PGM image and samples it at every node.
///
/// The map may have a finer resolution than the grid; each node takes the
/// value of the map cell that contains its cell centre.
pub fn load_external_map(g: &GridGraph, path: &Path) -> Result<ScalarField, FieldError> {
    let read_err = |reason: String| FieldError::Read {
        path: path.display().to_string(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| read_err(e.to_string()))?;
    let grid = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("pnm") => parse_image(&bytes).map_err(read_err)?,
        _ => parse_csv(&String::from_utf8_lossy(&bytes)).map_err(read_err)?,
    };
    sample_grid(g, &grid, "external_map")
}

struct RasterGrid {
    rows: usize,
    cols: usize,
    cells: Vec<Option<f64>>,
}

fn parse_csv(text: &str) -> Result<RasterGrid, String> {
    let mut cells = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<Option<f64>> = line
            .split(',')
            .map(|s| {
                let s = s.trim();
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(|v| v.is_finite().then_some(v))
                        .map_err(|e| format!("line {}: {:?}: {}", i + 1, s, e))
                }
            })
            .collect::<Result<_, _>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(format!("line {} has {} columns, expected {}", i + 1, row.len(), c))
            }
            _ => {}
        }
        cells.extend(row);
        rows += 1;
    }
    Ok(RasterGrid {
        rows,
        cols: cols.unwrap_or(0),
        cells,
    })
}

fn parse_image(bytes: &[u8]) -> Result<RasterGrid, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    // 8-bit images are widened by 257, so v / 65535 maps both depths onto [0, 1].
    let img = img.into_luma16();
    let (w, h) = img.dimensions();
    Ok(RasterGrid {
        rows: h as usize,
        cols: w as usize,
        cells: img
            .pixels()
            .map(|p| Some(p.0[0] as f64 / u16::MAX as f64))
            .collect(),
    })
}

fn sample_grid(g: &GridGraph, grid: &RasterGrid, name: &str) -> Result<ScalarField, FieldError> {
    if grid.rows < g.rows() || grid.cols < g.cols() {
        return Err(FieldError::Resolution {
            map_rows: grid.rows,
            map_cols: grid.cols,
            grid_rows: g.rows(),
            grid_cols: g.cols(),
        });
    }
    let pick = |i: usize, grid_n: usize, map_n: usize| -> usize {
        if grid_n == map_n {
            i
        } else {
            (((i as f64 + 0.5) / grid_n as f64 * map_n as f64).floor() as usize).min(map_n - 1)
        }
    };
    let values = g
        .nodes()
        .map(|n| {
            let (r, c) = g.cell(n);
            let (mr, mc) = (pick(r, g.rows(), grid.rows), pick(c, g.cols(), grid.cols));
            grid.cells[mr * grid.cols + mc].ok_or(FieldError::MissingValue { row: mr, col: mc })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScalarField {
        name: name.to_string(),
        values,
    })
}

/// Field value plus zero-mean Gaussian noise.
pub fn sample(
    field: &ScalarField,
    n: NodeId,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<f64, FieldError> {
    let v = field.get(n)?;
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).map_err(|e| FieldError::Spec(e.to_string()))?;
        Ok(v + noise.sample(rng))
    } else {
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OccupancyMask;

    fn grid(rows: usize, cols: usize) -> GridGraph {
        GridGraph::from_mask(OccupancyMask::from_fn(rows, cols, |_, _| true).unwrap(), 5.0)
            .unwrap()
    }

    #[test]
    fn single_peak_normalized_max_at_center() {
        let g = grid(7, 7);
        let bumps = [GaussianBump {
            center: (3.0, 4.0),
            width: 2.0,
            amplitude: 1.0,
        }];
        let f = field_from_bumps(&g, "gt", &bumps, true);
        let peak = g.node_at(3, 4).unwrap();
        assert_eq!(f.get(peak).unwrap(), 1.0);
        assert_eq!(f.max(), 1.0);
        assert_eq!(f.min(), 0.0);
    }

    #[test]
    fn generated_single_peak_max_is_one() {
        let g = grid(8, 8);
        let spec = FieldSpec {
            seed: 3,
            n_peaks: 1,
            peak_width_range: (2.0, 2.0),
            amplitude_range: (1.0, 1.0),
            normalize: true,
        };
        let f = generate_field(&g, &spec).unwrap();
        assert_eq!(f.max(), 1.0);
        assert_eq!(f, generate_field(&g, &spec).unwrap());
    }

    #[test]
    fn two_corner_peaks_match_analytic_sum() {
        let g = grid(5, 5);
        let bumps = [
            GaussianBump {
                center: (0.0, 0.0),
                width: 1.0,
                amplitude: 2.0,
            },
            GaussianBump {
                center: (4.0, 4.0),
                width: 1.0,
                amplitude: 2.0,
            },
        ];
        let f = field_from_bumps(&g, "gt", &bumps, false);
        // Corner: own peak plus a tail at squared distance 32.
        let corner = 2.0 + 2.0 * (-16.0f64).exp();
        assert!((f.get(g.node_at(0, 0).unwrap()).unwrap() - corner).abs() < 1e-12);
        assert!((f.get(g.node_at(4, 4).unwrap()).unwrap() - corner).abs() < 1e-12);
        // Centre: two tails at squared distance 8.
        let center = 2.0 * 2.0 * (-4.0f64).exp();
        assert!((f.get(g.node_at(2, 2).unwrap()).unwrap() - center).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let g = grid(2, 2);
        let bad = FieldSpec {
            n_peaks: 0,
            ..FieldSpec::default()
        };
        assert!(generate_field(&g, &bad).is_err());
        let bad = FieldSpec {
            peak_width_range: (3.0, 1.0),
            ..FieldSpec::default()
        };
        assert!(generate_field(&g, &bad).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let g = GridGraph::from_mask(
            OccupancyMask::from_fn(6, 9, |r, c| (r + c) % 4 != 0).unwrap(),
            5.0,
        )
        .unwrap();
        let f = generate_field(&g, &FieldSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        std::fs::write(&path, f.to_csv_grid(&g)).unwrap();
        let loaded = load_external_map(&g, &path).unwrap();
        assert_eq!(loaded.values(), f.values());
    }

    #[test]
    fn double_resolution_map_samples_containing_cell() {
        let g = grid(3, 4);
        let mut text = String::new();
        for r in 0..6 {
            let row: Vec<String> = (0..8).map(|c| format!("{}", r * 100 + c)).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fine.csv");
        std::fs::write(&path, text).unwrap();
        let f = load_external_map(&g, &path).unwrap();
        for n in g.nodes() {
            let (r, c) = g.cell(n);
            // The node centre sits on the corner shared by four fine cells;
            // it belongs to the fine cell whose top-left corner it is.
            let expected = ((2 * r + 1) * 100 + 2 * c + 1) as f64;
            assert_eq!(f.get(n).unwrap(), expected);
        }
    }

    #[test]
    fn constant_and_too_small_maps() {
        let g = grid(2, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "0.25,0.25,0.25\n0.25,0.25,0.25\n").unwrap();
        assert!(load_external_map(&g, &path)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.25));
        std::fs::write(&path, "1,2\n3,4\n").unwrap();
        assert!(matches!(
            load_external_map(&g, &path),
            Err(FieldError::Resolution { .. })
        ));
        assert!(matches!(
            load_external_map(&g, &dir.path().join("missing.csv")),
            Err(FieldError::Read { .. })
        ));
    }

    #[test]
    fn greyscale_image_maps_to_unit_interval() {
        let g = grid(2, 2);
        let pgm = b"P2\n2 2\n255\n0 255\n51 102\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, pgm).unwrap();
        let f = load_external_map(&g, &path).unwrap();
        let expect = [0.0, 1.0, 0.2, 0.4];
        for (v, e) in f.values().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn noise_free_sampling_is_exact_and_noisy_sampling_is_unbiased() {
        let g = grid(2, 2);
        let f = ScalarField::new("gt", vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample(&f, NodeId(2), 0.0, &mut rng).unwrap(), 0.3);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| sample(&f, NodeId(2), 0.1, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.3).abs() < 3.0 * 0.1 / (n as f64).sqrt());
        assert!(sample(&f, NodeId(7), 0.0, &mut rng).is_err());

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            assert_eq!(
                sample(&f, NodeId(0), 0.1, &mut a).unwrap(),
                sample(&f, NodeId(0), 0.1, &mut b).unwrap()
            );
        }
        let _ = g;
    }
}
