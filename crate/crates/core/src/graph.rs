//! Proximity networks between stations, their difference operators and the
//! network Laplacian.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::data::StationRegistry;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{ParamDims, StationBlocks};
use crate::unionfind::UnionFind;

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Great-circle distance in metres between two points in decimal degrees.
pub fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Undirected station network stored as sorted neighbour lists. Every edge
/// appears as two directed pairs; pairs are ordered by source station, then
/// neighbour, and that order defines the rows of the incidence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ProximityGraph {
    radius_m: f64,
    neighbors: Vec<Vec<usize>>,
    row_start: Vec<usize>,
}

impl ProximityGraph {
    /// Builds a graph from neighbour lists, checking symmetry and the absence
    /// of self-loops.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>, radius_m: f64) -> Result<Self> {
        let n = neighbors.len();
        if n == 0 {
            return Err(Error::Validation("graph needs at least one station".into()));
        }
        for (s, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&t| t >= n || t == s) {
                return Err(Error::Validation(format!("invalid neighbour list for station {s}")));
            }
        }
        for (s, list) in neighbors.iter().enumerate() {
            for &t in list {
                if neighbors[t].binary_search(&s).is_err() {
                    return Err(Error::Validation(format!("edge {s}-{t} is not symmetric")));
                }
            }
        }
        let mut row_start = Vec::with_capacity(n + 1);
        row_start.push(0);
        for list in &neighbors {
            row_start.push(row_start.last().unwrap() + list.len());
        }
        Ok(Self { radius_m, neighbors, row_start })
    }

    /// Graph on `n` stations from undirected edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut nb = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!("edge ({a},{b}) out of range")));
            }
            nb[a].push(b);
            nb[b].push(a);
        }
        Self::from_neighbors(nb, f64::NAN)
    }

    pub fn n_stations(&self) -> usize {
        self.neighbors.len()
    }

    /// Radius used to build the graph (NaN for hand-built graphs).
    pub fn radius_m(&self) -> f64 {
        self.radius_m
    }

    /// Number of directed pairs, M = Σ_s |N(s)|.
    pub fn n_pairs(&self) -> usize {
        *self.row_start.last().unwrap()
    }

    pub fn n_edges(&self) -> usize {
        self.n_pairs() / 2
    }

    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.neighbors[s]
    }

    pub fn degree(&self, s: usize) -> usize {
        self.neighbors[s].len()
    }

    /// Rows of station `s`'s directed pairs.
    pub fn group_rows(&self, s: usize) -> Range<usize> {
        self.row_start[s]..self.row_start[s + 1]
    }

    /// Row of the directed pair (s, t), if they are neighbours.
    pub fn row_index(&self, s: usize, t: usize) -> Option<usize> {
        self.neighbors[s].binary_search(&t).ok().map(|k| self.row_start[s] + k)
    }

    /// Directed pairs in row order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors.iter().enumerate().flat_map(|(s, l)| l.iter().map(move |&t| (s, t)))
    }

    /// Each undirected edge once, as (s, t) with s < t.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs().filter(|(s, t)| s < t)
    }

    /// Connected-component labels (numbered by first appearance) and count.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut uf = UnionFind::new(self.n_stations());
        for (s, t) in self.edges() {
            uf.union(s, t);
        }
        let k = uf.n_components();
        (uf.labels(), k)
    }

    pub fn incidence(&self) -> Incidence<'_> {
        Incidence { graph: self }
    }

    /// Graph Laplacian (degree minus adjacency); equals ½·DᵀD for the
    /// incidence matrix D.
    pub fn laplacian(&self) -> Array2<f64> {
        let n = self.n_stations();
        let mut l = Array2::zeros((n, n));
        for (s, list) in self.neighbors.iter().enumerate() {
            l[[s, s]] = list.len() as f64;
            for &t in list {
                l[[s, t]] = -1.0;
            }
        }
        l
    }

    /// Writes `station_a,station_b,distance_m` for every undirected edge.
    pub fn write_edge_list(&self, registry: &StationRegistry, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        check_registry(self, registry)?;
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        wtr.write_record(["station_a", "station_b", "distance_m"]).map_err(|e| Error::csv(path, e))?;
        for (s, t) in self.edges() {
            let (a, b) = (registry.get(s), registry.get(t));
            let d = haversine_m(a.latitude, a.longitude, b.latitude, b.longitude);
            wtr.write_record([a.id.as_str(), b.id.as_str(), &format!("{d:.3}")])
                .map_err(|e| Error::csv(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    /// Minimal GraphML document with coordinates and capacities as node data.
    pub fn to_graphml(&self, registry: &StationRegistry) -> Result<String> {
        check_registry(self, registry)?;
        let mut out = String::new();
        out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        out.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
        out.push_str("  <key id=\"lat\" for=\"node\" attr.name=\"latitude\" attr.type=\"double\"/>\n");
        out.push_str("  <key id=\"lon\" for=\"node\" attr.name=\"longitude\" attr.type=\"double\"/>\n");
        out.push_str("  <key id=\"cap\" for=\"node\" attr.name=\"capacity\" attr.type=\"int\"/>\n");
        out.push_str("  <graph id=\"proximity\" edgedefault=\"undirected\">\n");
        for st in registry.stations() {
            let _ = writeln!(
                out,
                "    <node id=\"{}\"><data key=\"lat\">{}</data><data key=\"lon\">{}</data><data key=\"cap\">{}</data></node>",
                xml_escape(&st.id),
                st.latitude,
                st.longitude,
                st.capacity
            );
        }
        for (s, t) in self.edges() {
            let _ = writeln!(
                out,
                "    <edge source=\"{}\" target=\"{}\"/>",
                xml_escape(&registry.get(s).id),
                xml_escape(&registry.get(t).id)
            );
        }
        out.push_str("  </graph>\n</graphml>\n");
        Ok(out)
    }
}

fn check_registry(graph: &ProximityGraph, registry: &StationRegistry) -> Result<()> {
    if graph.n_stations() != registry.len() {
        return Err(Error::Dimension(format!(
            "graph has {} stations, registry {}",
            graph.n_stations(),
            registry.len()
        )));
    }
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Stations are neighbours when their great-circle distance is strictly
/// below `radius_m`.
pub fn build_proximity(registry: &StationRegistry, radius_m: f64) -> Result<ProximityGraph> {
    if registry.is_empty() {
        return Err(Error::Validation("cannot build a graph from an empty registry".into()));
    }
    if !(radius_m > 0.0) {
        return Err(Error::Validation(format!("radius must be positive, got {radius_m}")));
    }
    let st = registry.stations();
    let n = st.len();
    let mut nb = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let d = haversine_m(st[i].latitude, st[i].longitude, st[j].latitude, st[j].longitude);
            if d < radius_m {
                nb[i].push(j);
                nb[j].push(i);
            }
        }
    }
    ProximityGraph::from_neighbors(nb, radius_m)
}

/// Signed incidence operator: row (s, t) is e_s − e_t.
#[derive(Copy, Clone, Debug)]
pub struct Incidence<'a> {
    graph: &'a ProximityGraph,
}

impl Incidence<'_> {
    pub fn apply<F: Float>(&self, x: &[F]) -> Vec<F> {
        self.graph.pairs().map(|(s, t)| x[s] - x[t]).collect()
    }

    pub fn apply_t<F: Float>(&self, r: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.graph.n_stations()];
        for ((s, t), &v) in self.graph.pairs().zip(r) {
            out[s] += v;
            out[t] -= v;
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.graph.n_pairs(), self.graph.n_stations()));
        for (row, (s, t)) in self.graph.pairs().enumerate() {
            d[[row, s]] = 1.0;
            d[[row, t]] = -1.0;
        }
        d
    }
}

/// Eigendecomposition of the scaled Laplacian ¼·DᵀD (half the graph Laplacian).
#[derive(Clone, Debug)]
pub struct NetLaplacian {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns, matching `eigenvalues`.
    pub eigenvectors: Array2<f64>,
    /// Column sums of the eigenvector matrix (Eᵀ·1).
    pub column_sums: Vec<f64>,
}

impl NetLaplacian {
    /// Eigenvalues below `rel_tol` times the largest (or exactly zero when all vanish).
    pub fn zero_count(&self, rel_tol: f64) -> usize {
        let max = self.eigenvalues.first().copied().unwrap_or(0.0);
        let thr = rel_tol * max;
        self.eigenvalues.iter().filter(|&&v| v <= thr).count()
    }
}

/// Dense symmetric eigendecomposition of a symmetric matrix, sorted by
/// non-increasing eigenvalue.
pub(crate) fn symmetric_eigen(m: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = m.nrows();
    let dm = DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
    let eig = SymmetricEigen::try_new(dm, f64::EPSILON, 0).ok_or_else(|| {
        let fro: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        Error::Numerical(format!("symmetric eigendecomposition failed (n = {n}, Frobenius norm {fro:.3e})"))
    })?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(i, j)| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

pub fn laplacian_eig(graph: &ProximityGraph) -> Result<NetLaplacian> {
    let lt = graph.laplacian() * 0.5;
    let (eigenvalues, eigenvectors) = symmetric_eigen(&lt)?;
    let column_sums = eigenvectors.sum_axis(ndarray::Axis(0)).to_vec();
    Ok(NetLaplacian { eigenvalues, eigenvectors, column_sums })
}

/// Stations replicated over hour layers: spatial edges inside each layer plus
/// the cyclic chain (s, h)–(s, h+1 mod H) for every station.
#[derive(Clone, Debug)]
pub struct MultilayerGraph<'a> {
    pub graph: &'a ProximityGraph,
    pub n_layers: usize,
}

impl<'a> MultilayerGraph<'a> {
    pub fn new(graph: &'a ProximityGraph, n_layers: usize) -> Self {
        Self { graph, n_layers }
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_stations() * self.n_layers
    }

    /// Node id of (station, layer).
    #[inline]
    pub fn node(&self, s: usize, h: usize) -> usize {
        h * self.graph.n_stations() + s
    }

    pub fn intra_edges(&self) -> impl Iterator<Item = ((usize, usize), (usize, usize))> + '_ {
        (0..self.n_layers).flat_map(move |h| self.graph.edges().map(move |(s, t)| ((s, h), (t, h))))
    }

    /// For two layers the cycle collapses to a single edge per station.
    pub fn inter_edges(&self) -> impl Iterator<Item = ((usize, usize), (usize, usize))> + '_ {
        let l = self.n_layers;
        let count = if l == 2 { 1 } else { l };
        (0..self.graph.n_stations()).flat_map(move |s| (0..count).map(move |h| ((s, h), (s, (h + 1) % l))))
    }
}

/// Operators mapping a consensus parameter vector to the fusion differences.
///
/// `theta` rows follow the directed pairs; columns are
/// `[√2(θ_s − θ_t), (φ^hod_{s,h} − φ^hod_{t,h}) for h ≥ 1, (φ^dow_{s,d} − φ^dow_{t,d}) for d ≥ 1]`.
/// `hour` is S × H with entry (s, h) = φ^hod_{s,h+1 mod H} − φ^hod_{s,h}.
/// Shared day-of-week effects cancel in both.
#[derive(Copy, Clone, Debug)]
pub struct ConstraintOps<'a> {
    pub graph: &'a ProximityGraph,
    pub dims: ParamDims,
}

pub fn constraint_operators(graph: &ProximityGraph, dims: ParamDims) -> Result<ConstraintOps<'_>> {
    if graph.n_stations() != dims.n_stations {
        return Err(Error::Dimension(format!(
            "graph has {} stations, parameters {}",
            graph.n_stations(),
            dims.n_stations
        )));
    }
    Ok(ConstraintOps { graph, dims })
}

impl ConstraintOps<'_> {
    /// Columns of the network-difference block.
    pub fn gamma_width(&self) -> usize {
        1 + self.dims.hod_free() + self.dims.dow_free()
    }

    pub fn apply_theta<F: Float>(&self, b: &StationBlocks<F>) -> Array2<F> {
        let (h1, d1) = (self.dims.hod_free(), self.dims.dow_free());
        let sqrt2 = F::cst(std::f64::consts::SQRT_2);
        let mut out = Array2::zeros((self.graph.n_pairs(), self.gamma_width()));
        for (row, (s, t)) in self.graph.pairs().enumerate() {
            let dt = b.theta[s] - b.theta[t];
            out[[row, 0]] = sqrt2 * dt;
            for h in 0..h1 {
                out[[row, 1 + h]] = dt + b.hod_station[[s, h]] - b.hod_station[[t, h]];
            }
            for d in 0..d1 {
                out[[row, 1 + h1 + d]] = dt + b.dow_station[[s, d]] - b.dow_station[[t, d]];
            }
        }
        out
    }

    pub fn apply_theta_t<F: Float>(&self, g: &Array2<F>) -> StationBlocks<F> {
        let (h1, d1) = (self.dims.hod_free(), self.dims.dow_free());
        let sqrt2 = F::cst(std::f64::consts::SQRT_2);
        let mut out = StationBlocks::zeros(self.dims);
        for (row, (s, t)) in self.graph.pairs().enumerate() {
            let mut th = sqrt2 * g[[row, 0]];
            for h in 0..h1 {
                let v = g[[row, 1 + h]];
                th += v;
                out.hod_station[[s, h]] += v;
                out.hod_station[[t, h]] -= v;
            }
            for d in 0..d1 {
                let v = g[[row, 1 + h1 + d]];
                th += v;
                out.dow_station[[s, d]] += v;
                out.dow_station[[t, d]] -= v;
            }
            out.theta[s] += th;
            out.theta[t] -= th;
        }
        out
    }

    pub fn apply_hour<F: Float>(&self, b: &StationBlocks<F>) -> Array2<F> {
        let hn = self.dims.n_hours;
        let mut out = Array2::zeros((self.dims.n_stations, hn));
        // θ_s cancels; v_0 = 0 and v_h = hod_h + hod_{s,h}
        let v = |s: usize, h: usize| if h == 0 { F::zero() } else { b.hod[h - 1] + b.hod_station[[s, h - 1]] };
        for s in 0..self.dims.n_stations {
            for h in 0..hn {
                out[[s, h]] = v(s, (h + 1) % hn) - v(s, h);
            }
        }
        out
    }

    pub fn apply_hour_t<F: Float>(&self, p: &Array2<F>) -> StationBlocks<F> {
        let hn = self.dims.n_hours;
        let mut out = StationBlocks::zeros(self.dims);
        for s in 0..self.dims.n_stations {
            for h in 0..hn {
                let val = p[[s, h]];
                let up = (h + 1) % hn;
                if up > 0 {
                    out.hod[up - 1] += val;
                    out.hod_station[[s, up - 1]] += val;
                }
                if h > 0 {
                    out.hod[h - 1] -= val;
                    out.hod_station[[s, h - 1]] -= val;
                }
            }
        }
        out
    }
}
