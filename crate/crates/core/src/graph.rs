//! Navigation graph over an occupancy mask.
//!
//! Every navigable cell becomes a node; nodes are numbered row-major over the
//! navigable cells only. Cells are joined along the eight compass directions.
//! A diagonal edge exists only when both orthogonal cells it would cut past
//! are navigable, so routes never clip an obstacle corner.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::f64::consts::SQRT_2;
use std::fmt;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("mask is {mask_rows}x{mask_cols} but geo reference is {geo_rows}x{geo_cols}")]
    DimensionMismatch {
        mask_rows: usize,
        mask_cols: usize,
        geo_rows: usize,
        geo_cols: usize,
    },
    #[error("mask has no navigable cell")]
    NoNavigableCells,
    #[error("mask must have at least one row and one column")]
    EmptyMask,
    #[error("mask data has {got} cells, expected {expected}")]
    CellCount { expected: usize, got: usize },
    #[error("invalid mask: {0}")]
    Parse(String),
    #[error("cell area must be positive, got {0}")]
    BadCellArea(f64),
    #[error("node {0} does not exist")]
    InvalidNode(NodeId),
    #[error("no path from {from} to {to}")]
    Unreachable { from: NodeId, to: NodeId },
    #[error("coordinate ({lat}, {lon}) lies outside the grid bounding box")]
    OutsideBounds { lat: f64, lon: f64 },
    #[error("attribute {name} has {got} values for {expected} nodes")]
    AttributeLength {
        name: String,
        expected: usize,
        got: usize,
    },
}

/// Dense node index, row-major over navigable cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Boolean grid, `true` = navigable water.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyMask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl OccupancyMask {
    pub fn new(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self, GraphError> {
        if rows == 0 || cols == 0 {
            return Err(GraphError::EmptyMask);
        }
        if cells.len() != rows * cols {
            return Err(GraphError::CellCount {
                expected: rows * cols,
                got: cells.len(),
            });
        }
        if !cells.iter().any(|&c| c) {
            return Err(GraphError::NoNavigableCells);
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, GraphError> {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(f(r, c));
            }
        }
        Self::new(rows, cols, cells)
    }

    /// Parses an ASCII grid of `0`/`1`. Cells may be packed (`0110`) or
    /// separated by whitespace or commas. Blank lines and `#` comments are skipped.
    pub fn from_ascii(text: &str) -> Result<Self, GraphError> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut row = Vec::new();
            for ch in line.chars() {
                match ch {
                    '0' => row.push(false),
                    '1' => row.push(true),
                    ' ' | '\t' | ',' => {}
                    other => {
                        return Err(GraphError::Parse(format!(
                            "line {}: unexpected character {:?}",
                            lineno + 1,
                            other
                        )))
                    }
                }
            }
            rows.push(row);
        }
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != n_cols) {
            return Err(GraphError::Parse(format!(
                "row {} has a different width than row 1",
                i + 1
            )));
        }
        Self::new(n_rows, n_cols, rows.into_iter().flatten().collect())
    }

    /// Greyscale image (PGM): any nonzero pixel is navigable.
    pub fn from_image_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| GraphError::Parse(e.to_string()))?
            .into_luma16();
        let (w, h) = img.dimensions();
        let cells = img.pixels().map(|p| p.0[0] != 0).collect();
        Self::new(h as usize, w as usize, cells)
    }

    /// Loads a mask by extension: `.pgm`/`.pnm` as image, anything else as ASCII.
    pub fn load(path: &FsPath) -> Result<Self, GraphError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GraphError::Parse(format!("{}: {}", path.display(), e)))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") | Some("pnm") => Self::from_image_bytes(&bytes),
            _ => Self::from_ascii(&String::from_utf8_lossy(&bytes)),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        row < self.rows && col < self.cols && self.cells[row * self.cols + col]
    }

    pub fn navigable_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(if self.get(r, c) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// The 30x49 lake mask with 351 navigable cells shipped with the crate.
pub fn sample_lake_mask() -> OccupancyMask {
    OccupancyMask::from_ascii(include_str!("../data/lake_30x49.txt"))
        .expect("bundled mask is valid")
}

/// Geographic corners of the grid. Row 0 is the northern edge, column 0 the western edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

/// Per-cell latitude/longitude of cell centres plus the nominal cell area.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoReference {
    rows: usize,
    cols: usize,
    lat_lon: Vec<(f64, f64)>,
    cell_area: f64,
}

impl GeoReference {
    pub fn new(
        rows: usize,
        cols: usize,
        lat_lon: Vec<(f64, f64)>,
        cell_area: f64,
    ) -> Result<Self, GraphError> {
        if !(cell_area > 0.0 && cell_area.is_finite()) {
            return Err(GraphError::BadCellArea(cell_area));
        }
        if lat_lon.len() != rows * cols {
            return Err(GraphError::CellCount {
                expected: rows * cols,
                got: lat_lon.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            lat_lon,
            cell_area,
        })
    }

    /// Cell centres linearly interpolated inside the box.
    pub fn from_bounding_box(
        rows: usize,
        cols: usize,
        bbox: BoundingBox,
        cell_area: f64,
    ) -> Result<Self, GraphError> {
        let mut lat_lon = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let lat = bbox.lat_max - (r as f64 + 0.5) / rows as f64 * (bbox.lat_max - bbox.lat_min);
            for c in 0..cols {
                let lon =
                    bbox.lon_min + (c as f64 + 0.5) / cols as f64 * (bbox.lon_max - bbox.lon_min);
                lat_lon.push((lat, lon));
            }
        }
        Self::new(rows, cols, lat_lon, cell_area)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    pub fn cell_lat_lon(&self, row: usize, col: usize) -> (f64, f64) {
        self.lat_lon[row * self.cols + col]
    }

    /// Bilinear interpolation of cell centres at fractional cell coordinates.
    /// Outside the outermost centres the border spacing is extrapolated.
    fn interpolate(&self, row: f64, col: f64) -> (f64, f64) {
        let (r0, fr) = bracket(row, self.rows);
        let (c0, fc) = bracket(col, self.cols);
        let r1 = (r0 + 1).min(self.rows - 1);
        let c1 = (c0 + 1).min(self.cols - 1);
        let p = |r: usize, c: usize| self.cell_lat_lon(r, c);
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| {
            (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
        };
        // With a single row/column there is nothing to extrapolate from.
        let top = lerp(p(r0, c0), p(r0, c1), if c1 == c0 { 0.0 } else { fc });
        let bottom = lerp(p(r1, c0), p(r1, c1), if c1 == c0 { 0.0 } else { fc });
        lerp(top, bottom, if r1 == r0 { 0.0 } else { fr })
    }

    fn reference_point(&self) -> (f64, f64) {
        let n = self.lat_lon.len() as f64;
        let (slat, slon) = self
            .lat_lon
            .iter()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        (slat / n, slon / n)
    }
}

fn bracket(x: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let base = x.floor().clamp(0.0, (n - 2) as f64);
    (base as usize, x - base)
}

/// Length of a route as counts of orthogonal and diagonal edges.
///
/// Lengths are `orth * side + diag * side * sqrt(2)`; comparing the integer
/// pair is exact, so equal-length routes are recognised as ties.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathCost {
    pub orth: u32,
    pub diag: u32,
}

impl PathCost {
    pub const ZERO: PathCost = PathCost { orth: 0, diag: 0 };

    pub fn meters(self, side: f64) -> f64 {
        self.orth as f64 * side + self.diag as f64 * side * SQRT_2
    }

    pub fn add_edge(self, kind: EdgeKind) -> PathCost {
        match kind {
            EdgeKind::Orthogonal => PathCost {
                orth: self.orth + 1,
                diag: self.diag,
            },
            EdgeKind::Diagonal => PathCost {
                orth: self.orth,
                diag: self.diag + 1,
            },
        }
    }

    pub fn hops(self) -> u32 {
        self.orth + self.diag
    }
}

impl std::ops::Add for PathCost {
    type Output = PathCost;
    fn add(self, rhs: PathCost) -> PathCost {
        PathCost {
            orth: self.orth + rhs.orth,
            diag: self.diag + rhs.diag,
        }
    }
}

impl Ord for PathCost {
    fn cmp(&self, other: &Self) -> Ordering {
        // sign of x + y*sqrt(2)
        let x = self.orth as i64 - other.orth as i64;
        let y = self.diag as i64 - other.diag as i64;
        match (x.signum(), y.signum()) {
            (0, 0) => Ordering::Equal,
            (sx, sy) if sx >= 0 && sy >= 0 => Ordering::Greater,
            (sx, sy) if sx <= 0 && sy <= 0 => Ordering::Less,
            (1, _) => (x * x).cmp(&(2 * y * y)),
            _ => (2 * y * y).cmp(&(x * x)),
        }
    }
}

impl PartialOrd for PathCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Orthogonal,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub nodes: Vec<NodeId>,
    pub cost: PathCost,
    pub meters: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct NodeInfo {
    row: usize,
    col: usize,
    lat: f64,
    lon: f64,
}

#[derive(Debug, Clone)]
pub struct GridGraph {
    mask: OccupancyMask,
    geo: GeoReference,
    side: f64,
    nodes: Vec<NodeInfo>,
    cell_to_node: Vec<Option<NodeId>>,
    adjacency: Vec<Vec<(NodeId, EdgeKind)>>,
    attributes: BTreeMap<String, Vec<f64>>,
    bounds: BoundingBox,
    reference: (f64, f64),
}

impl GridGraph {
    pub fn build(mask: OccupancyMask, geo: GeoReference) -> Result<Self, GraphError> {
        if mask.rows() != geo.rows() || mask.cols() != geo.cols() {
            return Err(GraphError::DimensionMismatch {
                mask_rows: mask.rows(),
                mask_cols: mask.cols(),
                geo_rows: geo.rows(),
                geo_cols: geo.cols(),
            });
        }
        let (rows, cols) = (mask.rows(), mask.cols());
        let mut nodes = Vec::new();
        let mut cell_to_node = vec![None; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if mask.get(r, c) {
                    cell_to_node[r * cols + c] = Some(NodeId(nodes.len()));
                    let (lat, lon) = geo.cell_lat_lon(r, c);
                    nodes.push(NodeInfo {
                        row: r,
                        col: c,
                        lat,
                        lon,
                    });
                }
            }
        }
        if nodes.is_empty() {
            return Err(GraphError::NoNavigableCells);
        }

        let at = |r: isize, c: isize| -> Option<NodeId> {
            if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
                None
            } else {
                cell_to_node[r as usize * cols + c as usize]
            }
        };
        let mut adjacency = Vec::with_capacity(nodes.len());
        for info in &nodes {
            let (r, c) = (info.row as isize, info.col as isize);
            let mut adj = Vec::with_capacity(8);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let Some(n) = at(r + dr, c + dc) else { continue };
                    if dr != 0 && dc != 0 {
                        if at(r + dr, c).is_none() || at(r, c + dc).is_none() {
                            continue;
                        }
                        adj.push((n, EdgeKind::Diagonal));
                    } else {
                        adj.push((n, EdgeKind::Orthogonal));
                    }
                }
            }
            adj.sort_by_key(|(n, _)| *n);
            adjacency.push(adj);
        }

        let bounds = envelope(&geo);
        let reference = geo.reference_point();
        Ok(Self {
            side: geo.cell_area().sqrt(),
            mask,
            geo,
            nodes,
            cell_to_node,
            adjacency,
            attributes: BTreeMap::new(),
            bounds,
            reference,
        })
    }

    /// Graph over `mask` with square cells of `side` meters placed in a small
    /// box near the origin. Handy when geography is irrelevant.
    pub fn from_mask(mask: OccupancyMask, side: f64) -> Result<Self, GraphError> {
        let deg_per_m = 1.0 / (EARTH_RADIUS_M.to_radians());
        let bbox = BoundingBox {
            lat_min: 0.0,
            lat_max: mask.rows() as f64 * side * deg_per_m,
            lon_min: 0.0,
            lon_max: mask.cols() as f64 * side * deg_per_m,
        };
        let geo = GeoReference::from_bounding_box(mask.rows(), mask.cols(), bbox, side * side)?;
        Self::build(mask, geo)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn mask(&self) -> &OccupancyMask {
        &self.mask
    }

    pub fn geo(&self) -> &GeoReference {
        &self.geo
    }

    pub fn rows(&self) -> usize {
        self.mask.rows()
    }

    pub fn cols(&self) -> usize {
        self.mask.cols()
    }

    /// Orthogonal edge length in meters.
    pub fn cell_side(&self) -> f64 {
        self.side
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.0 < self.nodes.len()
    }

    fn check(&self, n: NodeId) -> Result<(), GraphError> {
        if self.contains(n) {
            Ok(())
        } else {
            Err(GraphError::InvalidNode(n))
        }
    }

    pub fn cell(&self, n: NodeId) -> (usize, usize) {
        let info = &self.nodes[n.0];
        (info.row, info.col)
    }

    /// Cell coordinates as reals, used by kernels and distance checks.
    pub fn cell_coords(&self, n: NodeId) -> (f64, f64) {
        let (r, c) = self.cell(n);
        (r as f64, c as f64)
    }

    /// Planar position of the cell centre in meters (x east, y south).
    pub fn position(&self, n: NodeId) -> (f64, f64) {
        let (r, c) = self.cell(n);
        (c as f64 * self.side, r as f64 * self.side)
    }

    pub fn node_at(&self, row: usize, col: usize) -> Option<NodeId> {
        if row >= self.rows() || col >= self.cols() {
            return None;
        }
        self.cell_to_node[row * self.cols() + col]
    }

    /// Planar distance between cell centres in meters.
    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        self.cell_distance_sq(a, b).sqrt() * self.side
    }

    /// Squared distance in cell units; exact for integer offsets.
    pub fn cell_distance_sq(&self, a: NodeId, b: NodeId) -> f64 {
        let (ra, ca) = self.cell(a);
        let (rb, cb) = self.cell(b);
        let dr = ra as f64 - rb as f64;
        let dc = ca as f64 - cb as f64;
        dr * dr + dc * dc
    }

    /// Nodes whose centre lies within `radius` meters of `center`, boundary included.
    pub fn within_radius(&self, center: NodeId, radius: f64) -> Vec<NodeId> {
        let limit = (radius / self.side).powi(2) * (1.0 + 1e-12);
        self.nodes()
            .filter(|&n| self.cell_distance_sq(center, n) <= limit)
            .collect()
    }

    pub fn neighbors(&self, n: NodeId) -> Result<Vec<NodeId>, GraphError> {
        self.check(n)?;
        Ok(self.adjacency[n.0].iter().map(|(m, _)| *m).collect())
    }

    /// Neighbours with edge kind, ascending by node id.
    pub fn edges(&self, n: NodeId) -> &[(NodeId, EdgeKind)] {
        &self.adjacency[n.0]
    }

    pub fn edge_kind(&self, a: NodeId, b: NodeId) -> Option<EdgeKind> {
        self.adjacency
            .get(a.0)?
            .iter()
            .find(|(m, _)| *m == b)
            .map(|(_, k)| *k)
    }

    pub fn edge_length(&self, kind: EdgeKind) -> f64 {
        match kind {
            EdgeKind::Orthogonal => self.side,
            EdgeKind::Diagonal => self.side * SQRT_2,
        }
    }

    /// Exact route costs from `source` to every node (`None` if unreachable).
    pub fn costs_from(&self, source: NodeId) -> Result<Vec<Option<PathCost>>, GraphError> {
        self.check(source)?;
        let mut dist: Vec<Option<PathCost>> = vec![None; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[source.0] = Some(PathCost::ZERO);
        heap.push(Reverse((PathCost::ZERO, source)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if dist[u.0].is_some_and(|best| d > best) {
                continue;
            }
            for &(v, kind) in &self.adjacency[u.0] {
                let nd = d.add_edge(kind);
                if dist[v.0].is_none_or(|cur| nd < cur) {
                    dist[v.0] = Some(nd);
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        Ok(dist)
    }

    /// Minimum-length route. Among equally short routes the lexicographically
    /// smallest node sequence is returned.
    pub fn shortest_path(&self, from: NodeId, to: NodeId) -> Result<Path, GraphError> {
        self.check(from)?;
        self.check(to)?;
        // Distances to `to`; the graph is undirected.
        let to_target = self.costs_from(to)?;
        let total = to_target[from.0].ok_or(GraphError::Unreachable { from, to })?;
        let mut nodes = vec![from];
        let mut cur = from;
        let mut remaining = total;
        while cur != to {
            let (next, kind) = self.adjacency[cur.0]
                .iter()
                .copied()
                .find(|&(v, kind)| {
                    to_target[v.0].is_some_and(|dv| dv.add_edge(kind) == remaining)
                })
                .expect("a shortest-path successor exists");
            remaining = match kind {
                EdgeKind::Orthogonal => PathCost {
                    orth: remaining.orth - 1,
                    diag: remaining.diag,
                },
                EdgeKind::Diagonal => PathCost {
                    orth: remaining.orth,
                    diag: remaining.diag - 1,
                },
            };
            nodes.push(next);
            cur = next;
        }
        Ok(Path {
            nodes,
            cost: total,
            meters: total.meters(self.side),
        })
    }

    /// Nodes reachable from `start`, ascending.
    pub fn reachable_from(&self, start: NodeId) -> Result<Vec<NodeId>, GraphError> {
        self.check(start)?;
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![start];
        seen[start.0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[u.0] {
                if !seen[v.0] {
                    seen[v.0] = true;
                    stack.push(v);
                }
            }
        }
        Ok(self.nodes().filter(|n| seen[n.0]).collect())
    }

    pub fn is_connected(&self) -> bool {
        self.reachable_from(NodeId(0))
            .map(|r| r.len() == self.nodes.len())
            .unwrap_or(false)
    }

    pub fn node_to_latlon(&self, n: NodeId) -> Result<(f64, f64), GraphError> {
        self.check(n)?;
        let info = &self.nodes[n.0];
        Ok((info.lat, info.lon))
    }

    pub fn bounds(&self) -> BoundingBox {
        self.bounds
    }

    /// Snaps a coordinate to the nearest navigable cell centre. Equidistant
    /// candidates resolve to the lower node id.
    pub fn latlon_to_node(&self, lat: f64, lon: f64) -> Result<NodeId, GraphError> {
        let b = self.bounds;
        if !(lat >= b.lat_min && lat <= b.lat_max && lon >= b.lon_min && lon <= b.lon_max) {
            return Err(GraphError::OutsideBounds { lat, lon });
        }
        let p = self.local_meters(lat, lon);
        let mut best = NodeId(0);
        let mut best_d = f64::INFINITY;
        for (i, info) in self.nodes.iter().enumerate() {
            let q = self.local_meters(info.lat, info.lon);
            let d = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
            // Float noise at an exact midpoint must not break the tie rule.
            if best_d.is_infinite() || d < best_d - 1e-9 * (1.0 + best_d) {
                best_d = d;
                best = NodeId(i);
            }
        }
        Ok(best)
    }

    fn local_meters(&self, lat: f64, lon: f64) -> (f64, f64) {
        let (lat0, lon0) = self.reference;
        let k = EARTH_RADIUS_M.to_radians();
        ((lon - lon0) * k * lat0.to_radians().cos(), (lat - lat0) * k)
    }

    /// Geographic position of a planar point (meters, same frame as [`position`]).
    ///
    /// [`position`]: GridGraph::position
    pub fn planar_to_latlon(&self, x: f64, y: f64) -> (f64, f64) {
        self.geo.interpolate(y / self.side, x / self.side)
    }

    pub fn set_attribute(&mut self, name: &str, values: Vec<f64>) -> Result<(), GraphError> {
        if values.len() != self.nodes.len() {
            return Err(GraphError::AttributeLength {
                name: name.to_string(),
                expected: self.nodes.len(),
                got: values.len(),
            });
        }
        self.attributes.insert(name.to_string(), values);
        Ok(())
    }

    pub fn attribute(&self, name: &str) -> Option<&[f64]> {
        self.attributes.get(name).map(Vec::as_slice)
    }
}

fn envelope(geo: &GeoReference) -> BoundingBox {
    // Extend the outermost centres by half a cell along each axis.
    let half_step = |a: (f64, f64), b: (f64, f64), n: usize| {
        if n > 1 {
            ((b.0 - a.0).abs() / (n - 1) as f64 / 2.0, (b.1 - a.1).abs() / (n - 1) as f64 / 2.0)
        } else {
            (0.0, 0.0)
        }
    };
    let (rows, cols) = (geo.rows(), geo.cols());
    let dr = half_step(geo.cell_lat_lon(0, 0), geo.cell_lat_lon(rows - 1, 0), rows);
    let dc = half_step(geo.cell_lat_lon(0, 0), geo.cell_lat_lon(0, cols - 1), cols);
    // Single-row or single-column grids fall back to half the cell side.
    let side_deg = geo.cell_area().sqrt() / EARTH_RADIUS_M.to_radians() / 2.0;
    let pad_lat = (dr.0 + dc.0).max(if rows == 1 { side_deg } else { 0.0 });
    let pad_lon = (dr.1 + dc.1).max(if cols == 1 { side_deg } else { 0.0 });
    let mut b = BoundingBox {
        lat_min: f64::INFINITY,
        lat_max: f64::NEG_INFINITY,
        lon_min: f64::INFINITY,
        lon_max: f64::NEG_INFINITY,
    };
    for &(lat, lon) in &geo.lat_lon {
        b.lat_min = b.lat_min.min(lat);
        b.lat_max = b.lat_max.max(lat);
        b.lon_min = b.lon_min.min(lon);
        b.lon_max = b.lon_max.max(lon);
    }
    b.lat_min -= pad_lat;
    b.lat_max += pad_lat;
    b.lon_min -= pad_lon;
    b.lon_max += pad_lon;
    b
}
