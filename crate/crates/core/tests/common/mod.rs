//! Shared fixtures and independent dense oracles for the integration tests.
//!
//! The oracles below rebuild the model from its definition (dense design,
//! profile-form penalties) and never call the crate's likelihood, penalty or
//! solver code.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use netfuse::data::{synth_panel, synth_registry, CalendarDims, RentalPanel, SynthConfig};
use netfuse::graph::ProximityGraph;
use netfuse::model::{CovariateEffects, ParamDims, ParamState};
use netfuse::penalty::PenaltyConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Erdős–Rényi graph on `n` stations with edge probability `p`.
pub fn random_graph(rng: &mut impl Rng, n: usize, p: f64) -> ProximityGraph {
    let mut edges = Vec::new();
    for s in 0..n {
        for t in s + 1..n {
            if rng.random_bool(p) {
                edges.push((s, t));
            }
        }
    }
    ProximityGraph::from_edges(n, &edges).unwrap()
}

/// Random graph with a spanning path, so it is connected.
pub fn connected_graph(rng: &mut impl Rng, n: usize, p: f64) -> ProximityGraph {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|s| (s - 1, s)).collect();
    for s in 0..n {
        for t in s + 2..n {
            if rng.random_bool(p) {
                edges.push((s, t));
            }
        }
    }
    ProximityGraph::from_edges(n, &edges).unwrap()
}

pub fn random_params(rng: &mut impl Rng, dims: ParamDims, scale: f64) -> ParamState<f64> {
    let v: Vec<f64> = (0..dims.n_free()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    ParamState::from_flat(dims, &v).unwrap()
}

/// Poisson panel on a synthetic calendar whose trend spans [0, 1).
pub fn small_panel(seed: u64, dims: ParamDims, n_days: usize, capacity: u32, level: f64, spread: f64) -> RentalPanel {
    let mut r = rng(seed ^ 0xabc);
    let mut truth = random_params(&mut r, dims, spread);
    truth.theta.mapv_inplace(|v| v + level);
    let cfg = SynthConfig {
        n_days,
        dims: CalendarDims { n_hours: dims.n_hours, n_days_of_week: dims.n_days_of_week },
        start_date: None,
        rain_prob: 0.4,
        time_scale: 1.0 / n_days as f64,
    };
    let reg = Arc::new(synth_registry(seed, dims.n_stations, 2000.0, capacity));
    synth_panel(seed, reg, &cfg, &truth).unwrap()
}

/// Dense reimplementation of the model. Coordinates, in this order:
/// θ (S), shared hour (H−1), shared day (D−1), trend, rain, air (3),
/// hour interactions ((S−1)(H−1)), day interactions ((S−1)(D−1)).
pub struct DenseModel {
    pub dims: ParamDims,
    pub x: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub y: DVector<f64>,
}

impl DenseModel {
    pub fn new(panel: &RentalPanel) -> Self {
        let dims = ParamDims::of_panel(panel);
        let (s_n, h_n, d_n) = (dims.n_stations, dims.n_hours, dims.n_days_of_week);
        let p = Self::width(dims);
        let n = panel.n_obs();
        let mut x = DMatrix::zeros(n, p);
        let mut offset = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        let mut i = 0;
        for s in 0..s_n {
            for (t, day) in panel.days().iter().enumerate() {
                for h in 0..h_n {
                    let d = day.day_of_week;
                    x[(i, s)] = 1.0;
                    if h > 0 {
                        x[(i, s_n + h - 1)] = 1.0;
                    }
                    if d > 0 {
                        x[(i, s_n + h_n - 1 + d - 1)] = 1.0;
                    }
                    let e = s_n + h_n - 1 + d_n - 1;
                    x[(i, e)] = day.time;
                    if day.rain {
                        x[(i, e + 1)] = 1.0;
                    }
                    let a = day.air.index();
                    if a > 0 {
                        x[(i, e + 1 + a)] = 1.0;
                    }
                    let hs0 = e + 5;
                    if s > 0 && h > 0 {
                        x[(i, hs0 + (s - 1) * (h_n - 1) + h - 1)] = 1.0;
                    }
                    let ds0 = hs0 + (s_n - 1) * (h_n - 1);
                    if s > 0 && d > 0 {
                        x[(i, ds0 + (s - 1) * (d_n - 1) + d - 1)] = 1.0;
                    }
                    offset[i] = f64::from(panel.registry().get(s).capacity).ln();
                    y[i] = f64::from(panel.count(s, t, h));
                    i += 1;
                }
            }
        }
        Self { dims, x, offset, y }
    }

    pub fn width(dims: ParamDims) -> usize {
        let (s, h, d) = (dims.n_stations, dims.n_hours, dims.n_days_of_week);
        s + (h - 1) + (d - 1) + 5 + (s - 1) * (h - 1) + (s - 1) * (d - 1)
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// First interaction coordinate; everything before it is unpenalized.
    pub fn first_interaction(&self) -> usize {
        let d = self.dims;
        d.n_stations + d.n_hours - 1 + d.n_days_of_week - 1 + 5
    }

    pub fn to_vec(&self, p: &ParamState<f64>) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.p());
        v.extend(p.theta.iter());
        v.extend(p.hod.iter());
        v.extend(p.dow.iter());
        v.extend(p.effects.to_array());
        v.extend(p.hod_station.iter());
        v.extend(p.dow_station.iter());
        DVector::from_vec(v)
    }

    pub fn to_params(&self, v: &DVector<f64>) -> ParamState<f64> {
        let d = self.dims;
        let (s_n, h1, d1) = (d.n_stations, d.n_hours - 1, d.n_days_of_week - 1);
        let mut p = ParamState::zeros(d);
        let mut k = 0;
        let mut take = |n: usize| {
            let out = v.rows(k, n).iter().copied().collect::<Vec<f64>>();
            k += n;
            out
        };
        p.theta = take(s_n).into();
        p.hod = take(h1).into();
        p.dow = take(d1).into();
        p.effects = CovariateEffects::from_slice(&take(5));
        p.hod_station = ndarray::Array2::from_shape_vec((s_n - 1, h1), take((s_n - 1) * h1)).unwrap();
        p.dow_station = ndarray::Array2::from_shape_vec((s_n - 1, d1), take((s_n - 1) * d1)).unwrap();
        p
    }

    pub fn eta(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.x * beta + &self.offset
    }

    /// Σ μ − y log μ (the log y! constant dropped).
    pub fn nll(&self, beta: &DVector<f64>) -> f64 {
        let eta = self.eta(beta);
        eta.iter().zip(self.y.iter()).map(|(e, y)| e.exp() - y * e).sum()
    }

    pub fn grad(&self, beta: &DVector<f64>) -> DVector<f64> {
        let r = self.eta(beta).map(f64::exp) - &self.y;
        self.x.tr_mul(&r)
    }

    pub fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let mu = self.eta(beta).map(f64::exp);
        let mut xw = self.x.clone();
        for (i, m) in mu.iter().enumerate() {
            xw.row_mut(i).scale_mut(*m);
        }
        self.x.tr_mul(&xw)
    }

    /// Profiles φ^hod (S × H) and φ^dow (S × D) from the definition.
    pub fn profiles(&self, beta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = self.to_params(beta);
        let d = self.dims;
        let hod = DMatrix::from_fn(d.n_stations, d.n_hours, |s, h| {
            let mut v = p.theta[s];
            if h > 0 {
                v += p.hod[h - 1];
                if s > 0 {
                    v += p.hod_station[[s - 1, h - 1]];
                }
            }
            v
        });
        let dow = DMatrix::from_fn(d.n_stations, d.n_days_of_week, |s, k| {
            let mut v = p.theta[s];
            if k > 0 {
                v += p.dow[k - 1];
                if s > 0 {
                    v += p.dow_station[[s - 1, k - 1]];
                }
            }
            v
        });
        (hod, dow)
    }

    pub fn penalty(&self, beta: &DVector<f64>, graph: &ProximityGraph, cfg: &PenaltyConfig) -> f64 {
        let l1: f64 = beta.rows(self.first_interaction(), self.p() - self.first_interaction()).abs().sum();
        let (hod, dow) = self.profiles(beta);
        let mut p_n = 0.0;
        for s in 0..self.dims.n_stations {
            let mut acc = 0.0;
            for &t in graph.neighbors(s) {
                acc += (hod.row(s) - hod.row(t)).norm_squared() + (dow.row(s) - dow.row(t)).norm_squared();
            }
            p_n += (graph.degree(s) as f64 * acc).sqrt();
        }
        let h_n = self.dims.n_hours;
        let mut p_h = 0.0;
        for s in 0..self.dims.n_stations {
            for h in 0..h_n {
                p_h += (hod[(s, (h + 1) % h_n)] - hod[(s, h)]).abs();
            }
        }
        cfg.lambda * l1 + cfg.lambda_n * p_n + cfg.lambda_h * p_h
    }

    pub fn objective(&self, beta: &DVector<f64>, graph: &ProximityGraph, cfg: &PenaltyConfig) -> f64 {
        self.nll(beta) + self.penalty(beta, graph, cfg)
    }

    /// Damped Newton on the columns in `cols` (others fixed at zero).
    pub fn newton(&self, cols: &[usize], max_iter: usize) -> DVector<f64> {
        let xs = self.x.select_columns(cols);
        let sub = DenseModel { dims: self.dims, x: xs, offset: self.offset.clone(), y: self.y.clone() };
        let mut b = DVector::zeros(cols.len());
        // Start from the log mean rate per station so exp() stays tame.
        let mean = self.y.mean().max(1e-3);
        let base = (mean / self.offset.map(f64::exp).mean()).ln();
        for (k, &c) in cols.iter().enumerate() {
            if c < self.dims.n_stations {
                b[k] = base;
            }
        }
        let mut f = sub.nll(&b);
        for _ in 0..max_iter {
            let g = sub.grad(&b);
            let h = sub.hessian(&b) + DMatrix::identity(cols.len(), cols.len()) * 1e-12;
            let step = h.cholesky().expect("positive definite Hessian").solve(&g);
            let dec = g.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &b - &step * t;
                let fc = sub.nll(&cand);
                if fc <= f - 0.25 * t * dec || t < 1e-10 {
                    b = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
            if dec < 1e-22 * f.abs().max(1.0) {
                break;
            }
        }
        let mut out = DVector::zeros(self.p());
        for (k, &c) in cols.iter().enumerate() {
            out[c] = b[k];
        }
        out
    }

    /// Unpenalized full-interaction maximum likelihood.
    pub fn mle_full(&self) -> DVector<f64> {
        let cols: Vec<usize> = (0..self.p()).collect();
        self.newton(&cols, 200)
    }

    /// Maximum likelihood with every interaction fixed at zero.
    pub fn mle_no_interaction(&self) -> DVector<f64> {
        let cols: Vec<usize> = (0..self.first_interaction()).collect();
        self.newton(&cols, 200)
    }
}

/// Penalty pieces g_k(K_k β) of the objective, as dense operator rows.
struct Splitting {
    k: DMatrix<f64>,
    /// (row range, weight, is_group): ℓ1 on each row or ℓ2 on the range.
    blocks: Vec<(std::ops::Range<usize>, f64, bool)>,
}

fn splitting(model: &DenseModel, graph: &ProximityGraph, cfg: &PenaltyConfig) -> Splitting {
    let p = model.p();
    let d = model.dims;
    let (s_n, h_n, d_n) = (d.n_stations, d.n_hours, d.n_days_of_week);
    // Linear maps β -> φ^hod_{s,h} and β -> φ^dow_{s,d} as rows.
    let unit = |j: usize| {
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        model.profiles(&e)
    };
    let basis: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..p).map(unit).collect();
    let hod_row = |s: usize, h: usize| DVector::from_fn(p, |j, _| basis[j].0[(s, h)]);
    let dow_row = |s: usize, k: usize| DVector::from_fn(p, |j, _| basis[j].1[(s, k)]);
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut blocks = Vec::new();
    if cfg.lambda > 0.0 {
        for j in model.first_interaction()..p {
            let mut e = DVector::zeros(p);
            e[j] = 1.0;
            blocks.push((rows.len()..rows.len() + 1, cfg.lambda, false));
            rows.push(e);
        }
    }
    if cfg.lambda_n > 0.0 {
        for s in 0..s_n {
            if graph.degree(s) == 0 {
                continue;
            }
            let start = rows.len();
            for &t in graph.neighbors(s) {
                for h in 0..h_n {
                    rows.push(hod_row(s, h) - hod_row(t, h));
                }
                for k in 0..d_n {
                    rows.push(dow_row(s, k) - dow_row(t, k));
                }
            }
            blocks.push((start..rows.len(), cfg.lambda_n * (graph.degree(s) as f64).sqrt(), true));
        }
    }
    if cfg.lambda_h > 0.0 {
        for s in 0..s_n {
            for h in 0..h_n {
                blocks.push((rows.len()..rows.len() + 1, cfg.lambda_h, false));
                rows.push(hod_row(s, (h + 1) % h_n) - hod_row(s, h));
            }
        }
    }
    let k = if rows.is_empty() {
        DMatrix::zeros(0, p)
    } else {
        DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
    };
    Splitting { k, blocks }
}

fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.max()
}

/// Primal-dual proximal splitting (forward-backward on the likelihood,
/// exact proxes of the conjugate penalties). Returns the best objective seen
/// and its iterate.
pub fn proximal_oracle(
    model: &DenseModel,
    graph: &ProximityGraph,
    cfg: &PenaltyConfig,
    start: &DVector<f64>,
    iters: usize,
) -> (f64, DVector<f64>) {
    let sp = splitting(model, graph, cfg);
    let kt = sp.k.transpose();
    let k_norm2 = if sp.k.nrows() > 0 { largest_eigenvalue(&(&kt * &sp.k)) } else { 0.0 };
    let mut x = start.clone();
    let mut y = DVector::zeros(sp.k.nrows());
    let mut lip = largest_eigenvalue(&model.hessian(&x)) * 2.0;
    let mut best = (model.objective(&x, graph, cfg), x.clone());
    let steps = |lip: f64| {
        let sigma = if k_norm2 > 0.0 { 0.5 * lip / k_norm2 } else { 0.0 };
        (0.99 / (0.5 * lip + sigma * k_norm2), sigma)
    };
    let (mut tau, mut sigma) = steps(lip);
    for it in 0..iters {
        let g = model.grad(&x) + &kt * &y;
        let x_new = &x - g * tau;
        let bar = &x_new * 2.0 - &x;
        let mut y_new = &y + (&sp.k * bar) * sigma;
        for (range, w, group) in &sp.blocks {
            let mut seg = y_new.rows_mut(range.start, range.len());
            if *group {
                let n = seg.norm();
                if n > *w {
                    seg.scale_mut(*w / n);
                }
            } else {
                seg.apply(|v| *v = (*v).clamp(-*w, *w));
            }
        }
        x = x_new;
        y = y_new;
        if it % 50 == 49 {
            let f = model.objective(&x, graph, cfg);
            if !f.is_finite() || f > 10.0 * best.0.abs() + 1e6 {
                // Curvature grew past the step size: restart from the best point.
                lip *= 4.0;
                (tau, sigma) = steps(lip);
                x = best.1.clone();
                y.fill(0.0);
                continue;
            }
            if f < best.0 {
                best = (f, x.clone());
            }
            let local = largest_eigenvalue(&model.hessian(&x));
            if local > lip {
                lip = 1.5 * local;
                (tau, sigma) = steps(lip);
            }
        }
    }
    let f = model.objective(&x, graph, cfg);
    if f < best.0 {
        best = (f, x);
    }
    best
}
