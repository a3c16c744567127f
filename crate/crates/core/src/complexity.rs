//! Model complexity: fusion networks induced by the estimates, their
//! intersection with the proximity networks, and component counts.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::StationRegistry;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{symmetric_eigen, MultilayerGraph, ProximityGraph};
use crate::model::{ParamDims, ParamState, PhiView};
use crate::unionfind::UnionFind;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceMode {
    #[default]
    Absolute,
    /// Scaled by the larger magnitude of the two values.
    Relative,
}

/// When two estimates count as equal.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTolerance {
    pub eps: f64,
    #[serde(default)]
    pub mode: ToleranceMode,
}

impl Default for FusionTolerance {
    fn default() -> Self {
        Self { eps: 1e-6, mode: ToleranceMode::Absolute }
    }
}

impl FusionTolerance {
    pub fn absolute(eps: f64) -> Self {
        Self { eps, mode: ToleranceMode::Absolute }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(Error::Validation(format!("fusion tolerance must be finite and >= 0, got {}", self.eps)));
        }
        Ok(())
    }

    #[inline]
    pub fn same(&self, a: f64, b: f64) -> bool {
        let gap = (a - b).abs();
        match self.mode {
            ToleranceMode::Absolute => gap <= self.eps,
            ToleranceMode::Relative => gap <= self.eps * a.abs().max(b.abs()),
        }
    }
}

/// Equality classes of a set of values: sorted values are chained while
/// neighbouring gaps stay within tolerance. Class ids are numbered by first
/// appearance in input order.
pub fn fusion_classes(values: &[f64], tol: &FusionTolerance) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut chain = vec![0usize; n];
    let mut current = 0;
    for w in 0..n {
        if w > 0 && !tol.same(values[order[w - 1]], values[order[w]]) {
            current += 1;
        }
        chain[order[w]] = current;
    }
    let mut remap = vec![usize::MAX; current + 1];
    let mut next = 0;
    chain
        .iter()
        .map(|&c| {
            if remap[c] == usize::MAX {
                remap[c] = next;
                next += 1;
            }
            remap[c]
        })
        .collect()
}

/// Equality classes of the hourly and daily profiles. Stations `s`, `t` are
/// joined in an estimate network exactly when their class ids agree, so the
/// (dense) networks are never materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateNetworks {
    /// H rows of per-station class ids.
    pub hod: Vec<Vec<usize>>,
    /// D rows of per-station class ids.
    pub dow: Vec<Vec<usize>>,
}

impl EstimateNetworks {
    pub fn hod_edge(&self, h: usize, s: usize, t: usize) -> bool {
        s != t && self.hod[h][s] == self.hod[h][t]
    }

    pub fn dow_edge(&self, d: usize, s: usize, t: usize) -> bool {
        s != t && self.dow[d][s] == self.dow[d][t]
    }
}

pub fn estimate_networks(phi: &PhiView<f64>, tol: &FusionTolerance) -> EstimateNetworks {
    let classes = |m: &Array2<f64>| -> Vec<Vec<usize>> {
        m.columns().into_iter().map(|col| fusion_classes(&col.to_vec(), tol)).collect()
    };
    EstimateNetworks { hod: classes(&phi.hod), dow: classes(&phi.dow) }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentEngine {
    #[default]
    UnionFind,
    /// Null space of the layer Laplacian.
    Eigen,
}

/// Components of one layer of the intersection network, as labels
/// numbered by first appearance and their count.
pub fn layer_components(
    graph: &ProximityGraph,
    classes: &[usize],
    engine: ComponentEngine,
) -> Result<(Vec<usize>, usize)> {
    if classes.len() != graph.n_stations() {
        return Err(Error::Dimension(format!(
            "{} class ids for {} stations",
            classes.len(),
            graph.n_stations()
        )));
    }
    match engine {
        ComponentEngine::UnionFind => Ok(union_find_layer(graph, classes)),
        ComponentEngine::Eigen => match eigen_layer(graph, classes)? {
            Some(out) => Ok(out),
            None => {
                log::warn!("Laplacian null space is ambiguous; counting components by union-find instead");
                Ok(union_find_layer(graph, classes))
            }
        },
    }
}

fn union_find_layer(graph: &ProximityGraph, classes: &[usize]) -> (Vec<usize>, usize) {
    let mut uf = UnionFind::new(graph.n_stations());
    for (s, t) in graph.edges() {
        if classes[s] == classes[t] {
            uf.union(s, t);
        }
    }
    let n = uf.n_components();
    (uf.labels(), n)
}

/// Zero eigenvalues give the component count; stations are grouped by
/// their rows in the null-space basis. `None` when the grouping disagrees
/// with the count.
fn eigen_layer(graph: &ProximityGraph, classes: &[usize]) -> Result<Option<(Vec<usize>, usize)>> {
    let n = graph.n_stations();
    let mut lap = Array2::<f64>::zeros((n, n));
    for (s, t) in graph.edges() {
        if classes[s] == classes[t] {
            lap[[s, t]] -= 1.0;
            lap[[t, s]] -= 1.0;
            lap[[s, s]] += 1.0;
            lap[[t, t]] += 1.0;
        }
    }
    let (values, vectors) = symmetric_eigen(&lap)?;
    let max = values.first().copied().unwrap_or(0.0).max(1.0);
    let thr = 1e-9 * max;
    let null: Vec<usize> = (0..n).filter(|&k| values[k].abs() <= thr).collect();
    let n_zero = null.len();
    // entries of a null-space basis are ±1/√|component| mixtures, well above this
    let row_tol = 1e-7;
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if labels[s] != usize::MAX {
            continue;
        }
        for t in s..n {
            if labels[t] == usize::MAX && null.iter().all(|&k| (vectors[[s, k]] - vectors[[t, k]]).abs() <= row_tol) {
                labels[t] = next;
            }
        }
        next += 1;
    }
    Ok((next == n_zero).then_some((labels, n_zero)))
}

/// H × S matrix of component labels over (layer, station) nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterLabelMatrix {
    pub labels: Array2<usize>,
}

impl ClusterLabelMatrix {
    /// Layer-wise components with labels unique across the whole matrix.
    pub fn initial(
        graph: &ProximityGraph,
        nets: &EstimateNetworks,
        engine: ComponentEngine,
    ) -> Result<(Self, Vec<usize>)> {
        let h_n = nets.hod.len();
        let mut labels = Array2::zeros((h_n, graph.n_stations()));
        let mut per_layer = Vec::with_capacity(h_n);
        let mut offset = 0;
        for h in 0..h_n {
            let (l, count) = layer_components(graph, &nets.hod[h], engine)?;
            for (s, v) in l.into_iter().enumerate() {
                labels[[h, s]] = offset + v;
            }
            offset += count;
            per_layer.push(count);
        }
        Ok((Self { labels }, per_layer))
    }

    pub fn n_layers(&self) -> usize {
        self.labels.nrows()
    }

    pub fn n_unique(&self) -> usize {
        let mut v: Vec<usize> = self.labels.iter().copied().collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    /// Stations of `row` grouped by label, in order of first appearance.
    fn groups(&self, row: usize) -> Vec<Vec<usize>> {
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut out: Vec<Vec<usize>> = Vec::new();
        for (s, &l) in self.labels.row(row).iter().enumerate() {
            let i = *slot.entry(l).or_insert_with(|| {
                out.push(Vec::new());
                out.len() - 1
            });
            out[i].push(s);
        }
        out
    }

    fn relabel(&mut self, row: usize, from: usize, to: usize) {
        for v in self.labels.row_mut(row).iter_mut() {
            if *v == from {
                *v = to;
            }
        }
    }
}

/// One pass over consecutive layer pairs of `order`: each component of the
/// earlier layer is merged with at most one differently labelled component
/// of the next layer through a station whose estimate is unchanged across
/// the two layers. Returns whether any label changed.
pub fn link_layers(m: &mut ClusterLabelMatrix, hod: &Array2<f64>, order: &[usize], tol: &FusionTolerance) -> bool {
    let mut changed = false;
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        for comp in m.groups(a) {
            for &s in &comp {
                if !tol.same(hod[[s, a]], hod[[s, b]]) {
                    continue;
                }
                let m1 = m.labels[[a, comp[0]]];
                let m2 = m.labels[[b, s]];
                if m1 != m2 {
                    let lo = m1.min(m2);
                    m.relabel(a, m1, lo);
                    m.relabel(b, m2, lo);
                    changed = true;
                    break;
                }
            }
        }
    }
    changed
}

/// Components of the multilayer proximity network intersected with the
/// hourly estimate network, by layer-wise labelling and repeated forward
/// linking (including the wrap from the last hour to the first).
pub fn count_multilayer_components(
    graph: &ProximityGraph,
    phi: &PhiView<f64>,
    tol: &FusionTolerance,
    engine: ComponentEngine,
) -> Result<usize> {
    let nets = estimate_networks(phi, tol);
    let (mut m, _) = ClusterLabelMatrix::initial(graph, &nets, engine)?;
    link_to_fixed_point(&mut m, &phi.hod, tol);
    Ok(m.n_unique())
}

fn link_to_fixed_point(m: &mut ClusterLabelMatrix, hod: &Array2<f64>, tol: &FusionTolerance) {
    let h_n = m.n_layers();
    let forward: Vec<usize> = (0..h_n).collect();
    let wrap: Vec<usize> = std::iter::once(h_n - 1).chain(0..h_n - 1).collect();
    loop {
        let a = link_layers(m, hod, &forward, tol);
        let b = link_layers(m, hod, &wrap, tol);
        if !(a || b) {
            break;
        }
    }
}

/// Same count by union-find over the explicit node-layer graph.
pub fn multilayer_components_direct(graph: &ProximityGraph, phi: &PhiView<f64>, tol: &FusionTolerance) -> usize {
    let nets = estimate_networks(phi, tol);
    let ml = MultilayerGraph::new(graph, phi.hod.ncols());
    let mut uf = UnionFind::new(ml.n_nodes());
    for ((s, h), (t, _)) in ml.intra_edges() {
        if nets.hod_edge(h, s, t) {
            uf.union(ml.node(s, h), ml.node(t, h));
        }
    }
    for ((s, h), (_, k)) in ml.inter_edges() {
        if tol.same(phi.hod[[s, h]], phi.hod[[s, k]]) {
            uf.union(ml.node(s, h), ml.node(s, k));
        }
    }
    uf.n_components()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayComponents {
    pub day: usize,
    pub components: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    /// Unpenalized shared parameters (covariate, hour and day effects).
    pub n_shared: usize,
    pub multilayer_components: usize,
    /// Components of each hour layer before linking.
    pub layer_components: Vec<usize>,
    /// Day-of-week networks other than the baseline day.
    pub day_components: Vec<DayComponents>,
    pub numerator: usize,
    pub n_free: usize,
    /// numerator / n_free, not clamped to 1.
    pub mc: f64,
    pub tolerance: FusionTolerance,
    pub engine: ComponentEngine,
}

/// Proportion of effectively distinct parameters.
pub fn model_complexity<F: Float>(
    graph: &ProximityGraph,
    params: &ParamState<F>,
    tol: &FusionTolerance,
    engine: ComponentEngine,
) -> Result<McReport> {
    tol.validate()?;
    let dims: ParamDims = params.dims();
    if graph.n_stations() != dims.n_stations {
        return Err(Error::Dimension("graph and parameters disagree on station count".into()));
    }
    let phi = params.cast::<f64>().phi();
    let nets = estimate_networks(&phi, tol);
    let (mut m, per_layer) = ClusterLabelMatrix::initial(graph, &nets, engine)?;
    link_to_fixed_point(&mut m, &phi.hod, tol);
    let multilayer_components = m.n_unique();
    let mut day_components = Vec::new();
    for d in 1..dims.n_days_of_week {
        let (_, c) = layer_components(graph, &nets.dow[d], engine)?;
        day_components.push(DayComponents { day: d, components: c });
    }
    let n_shared = dims.n_shared();
    let numerator = n_shared + multilayer_components + day_components.iter().map(|d| d.components).sum::<usize>();
    let n_free = dims.n_free();
    Ok(McReport {
        n_shared,
        multilayer_components,
        layer_components: per_layer,
        day_components,
        numerator,
        n_free,
        mc: numerator as f64 / n_free as f64,
        tolerance: *tol,
        engine,
    })
}

/// An edge of an intersection network. Hourly edges join (station, hour)
/// nodes, within one hour or between consecutive hours; daily edges join
/// stations on one day of the week.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionEdge {
    pub network: String,
    pub layer_a: usize,
    pub layer_b: usize,
    pub station_a: usize,
    pub station_b: usize,
}

pub fn intersection_edges(graph: &ProximityGraph, phi: &PhiView<f64>, tol: &FusionTolerance) -> Vec<IntersectionEdge> {
    let nets = estimate_networks(phi, tol);
    let ml = MultilayerGraph::new(graph, phi.hod.ncols());
    let mut out = Vec::new();
    let edge = |network: &str, (s, a): (usize, usize), (t, b): (usize, usize)| IntersectionEdge {
        network: network.to_string(),
        layer_a: a,
        layer_b: b,
        station_a: s,
        station_b: t,
    };
    for (x, y) in ml.intra_edges() {
        if nets.hod_edge(x.1, x.0, y.0) {
            out.push(edge("hod", x, y));
        }
    }
    for (x, y) in ml.inter_edges() {
        if tol.same(phi.hod[[x.0, x.1]], phi.hod[[y.0, y.1]]) {
            out.push(edge("hod", x, y));
        }
    }
    for d in 1..phi.dow.ncols() {
        for (s, t) in graph.edges() {
            if nets.dow_edge(d, s, t) {
                out.push(edge("dow", (s, d), (t, d)));
            }
        }
    }
    out
}

/// CSV with columns network,layer_a,layer_b,station_a,station_b (station ids).
pub fn write_intersection_edges(edges: &[IntersectionEdge], registry: &StationRegistry, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["network", "layer_a", "layer_b", "station_a", "station_b"]).map_err(|e| Error::csv(path, e))?;
    for e in edges {
        w.write_record([
            e.network.as_str(),
            &e.layer_a.to_string(),
            &e.layer_b.to_string(),
            &registry.get(e.station_a).id,
            &registry.get(e.station_b).id,
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: usize) -> ProximityGraph {
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        ProximityGraph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn classes_chain_sorted_gaps() {
        let tol = FusionTolerance::absolute(0.1);
        assert_eq!(fusion_classes(&[1.0, 3.0, 1.05, 2.0], &tol), vec![0, 1, 0, 2]);
        assert_eq!(fusion_classes(&[0.0, 1.0, 2.0], &FusionTolerance::absolute(0.0)), vec![0, 1, 2]);
    }

    #[test]
    fn path_layer_examples() {
        let g = path(3);
        for engine in [ComponentEngine::UnionFind, ComponentEngine::Eigen] {
            assert_eq!(layer_components(&g, &[0, 0, 0], engine).unwrap().1, 1);
            assert_eq!(layer_components(&g, &[0, 1, 0], engine).unwrap().1, 3);
        }
    }

    #[test]
    fn linking_identical_layers_collapses_labels() {
        let g = path(4);
        let phi = PhiView { hod: Array2::from_elem((4, 5), 0.3), dow: Array2::from_elem((4, 2), 0.3) };
        let tol = FusionTolerance::default();
        assert_eq!(count_multilayer_components(&g, &phi, &tol, ComponentEngine::UnionFind).unwrap(), 1);
        let distinct = PhiView { hod: Array2::from_shape_fn((4, 5), |(s, h)| (s * 5 + h) as f64), dow: phi.dow.clone() };
        let nets = estimate_networks(&distinct, &tol);
        let (mut m, _) = ClusterLabelMatrix::initial(&g, &nets, ComponentEngine::UnionFind).unwrap();
        let before = m.clone();
        assert!(!link_layers(&mut m, &distinct.hod, &[0, 1, 2, 3, 4], &tol));
        assert_eq!(m, before);
        assert_eq!(count_multilayer_components(&g, &distinct, &tol, ComponentEngine::UnionFind).unwrap(), 20);
    }
}
