//! Lasso, network-fusion and hourly-fusion penalties and their proximal maps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::RentalPanel;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{constraint_operators, ProximityGraph};
use crate::model::{neg_loglik, ParamState, PhiView, StationBlocks};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    /// Lasso weight on station interactions.
    pub lambda: f64,
    /// Network fusion weight.
    pub lambda_n: f64,
    /// Hourly fusion weight.
    pub lambda_h: f64,
    /// Initial ADMM penalty parameter.
    pub rho: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { lambda: 0.0, lambda_n: 0.0, lambda_h: 0.0, rho: 1.0 }
    }
}

impl PenaltyConfig {
    pub fn new(lambda: f64, lambda_n: f64, lambda_h: f64) -> Self {
        Self { lambda, lambda_n, lambda_h, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda) || !ok(self.lambda_n) || !ok(self.lambda_h) {
            return Err(Error::Validation(format!("penalty weights must be finite and non-negative: {self:?}")));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Validation(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Network-fusion auxiliaries: one row per directed pair (grouped by source
/// station), `1 + (H-1) + (D-1)` columns.
pub type GammaBlock<F> = Array2<F>;

/// Hourly-fusion auxiliaries: S × H.
pub type PsiBlock<F> = Array2<F>;

/// Network fusion penalty from the station profiles:
/// Σ_s √(|N(s)| Σ_{t∈N(s)} [Σ_h (φ^hod_{s,h} − φ^hod_{t,h})² + Σ_d (φ^dow_{s,d} − φ^dow_{t,d})²]).
pub fn eval_p_n_phi<F: Float>(phi: &PhiView<F>, graph: &ProximityGraph) -> F {
    let mut total = F::zero();
    for s in 0..graph.n_stations() {
        let mut acc = F::zero();
        for &t in graph.neighbors(s) {
            for (a, b) in phi.hod.row(s).iter().zip(phi.hod.row(t)) {
                acc += (*a - *b) * (*a - *b);
            }
            for (a, b) in phi.dow.row(s).iter().zip(phi.dow.row(t)) {
                acc += (*a - *b) * (*a - *b);
            }
        }
        total += (F::cst(graph.degree(s) as f64) * acc).sqrt();
    }
    total
}

/// Network fusion penalty in the stored parameterization, expanding the
/// profile differences as 2(Δθ)² + Σ_{h≥1}(Δθ + Δθ^hod_h)² + Σ_{d≥1}(Δθ + Δθ^dow_d)².
pub fn eval_p_n<F: Float>(params: &ParamState<F>, graph: &ProximityGraph) -> Result<F> {
    let dims = params.dims();
    if graph.n_stations() != dims.n_stations {
        return Err(Error::Dimension("graph and parameters disagree on station count".into()));
    }
    let two = F::cst(2.0);
    let mut total = F::zero();
    for s in 0..dims.n_stations {
        let mut acc = F::zero();
        for &t in graph.neighbors(s) {
            let dt = params.theta[s] - params.theta[t];
            acc += two * dt * dt;
            for h in 1..dims.n_hours {
                let v = dt + params.hod_interaction(s, h) - params.hod_interaction(t, h);
                acc += v * v;
            }
            for d in 1..dims.n_days_of_week {
                let v = dt + params.dow_interaction(s, d) - params.dow_interaction(t, d);
                acc += v * v;
            }
        }
        total += (F::cst(graph.degree(s) as f64) * acc).sqrt();
    }
    Ok(total)
}

/// Cyclic hourly fusion penalty Σ_s Σ_h |φ^hod_{s,h+1 mod H} − φ^hod_{s,h}|.
pub fn eval_p_h<F: Float>(params: &ParamState<F>) -> F {
    let phi = params.phi();
    let (s_n, h_n) = phi.hod.dim();
    let mut total = F::zero();
    for s in 0..s_n {
        for h in 0..h_n {
            total += (phi.hod[[s, (h + 1) % h_n]] - phi.hod[[s, h]]).abs();
        }
    }
    total
}

/// Penalized objective: NLL + λ‖interactions‖₁ + λ_N p_N + λ_H p_H.
pub fn objective<F: Float>(
    params: &ParamState<F>,
    panel: &RentalPanel,
    graph: &ProximityGraph,
    cfg: &PenaltyConfig,
) -> Result<F> {
    let nll = neg_loglik(params, panel)?;
    Ok(nll + penalty_value(params, graph, cfg)?)
}

/// Penalty part of [`objective`].
pub fn penalty_value<F: Float>(params: &ParamState<F>, graph: &ProximityGraph, cfg: &PenaltyConfig) -> Result<F> {
    let mut total = F::cst(cfg.lambda) * params.interaction_l1();
    if cfg.lambda_n > 0.0 {
        total += F::cst(cfg.lambda_n) * eval_p_n(params, graph)?;
    }
    if cfg.lambda_h > 0.0 {
        total += F::cst(cfg.lambda_h) * eval_p_h(params);
    }
    Ok(total)
}

/// (1 − κ/‖v‖₂)₊ · v, written into `v`.
pub fn group_soft_threshold_in_place<F: Float>(v: &mut [F], kappa: F) {
    let norm = v.iter().map(|x| *x * *x).sum::<F>().sqrt();
    let factor = if norm > kappa { F::one() - kappa / norm } else { F::zero() };
    for x in v.iter_mut() {
        *x *= factor;
    }
}

pub fn group_soft_threshold<F: Float>(v: &[F], kappa: F) -> Vec<F> {
    let mut out = v.to_vec();
    group_soft_threshold_in_place(&mut out, kappa);
    out
}

#[inline]
pub fn scalar_soft_threshold<F: Float>(x: F, kappa: F) -> F {
    if x > kappa {
        x - kappa
    } else if x < -kappa {
        x + kappa
    } else {
        F::zero()
    }
}

/// Γ update: per-station group soft-threshold of (S_Γ − T_Γ) with threshold
/// √|N(s)|·λ_N/ρ.
pub fn update_gamma<F: Float>(
    s_gamma: &GammaBlock<F>,
    t_gamma: &GammaBlock<F>,
    cfg: &PenaltyConfig,
    graph: &ProximityGraph,
) -> Result<GammaBlock<F>> {
    if s_gamma.dim() != t_gamma.dim() || s_gamma.nrows() != graph.n_pairs() {
        return Err(Error::Dimension(format!(
            "gamma blocks {:?}/{:?} do not match {} directed pairs",
            s_gamma.dim(),
            t_gamma.dim(),
            graph.n_pairs()
        )));
    }
    let mut out = s_gamma - t_gamma;
    let w = out.ncols();
    let flat = out.as_slice_mut().expect("standard layout");
    for s in 0..graph.n_stations() {
        let rows = graph.group_rows(s);
        if rows.is_empty() {
            continue;
        }
        let kappa = F::cst((graph.degree(s) as f64).sqrt() * cfg.lambda_n / cfg.rho);
        group_soft_threshold_in_place(&mut flat[rows.start * w..rows.end * w], kappa);
    }
    Ok(out)
}

/// Ψ update: entrywise soft-threshold of (S_Ψ − T_Ψ) at λ_H/ρ.
pub fn update_psi<F: Float>(s_psi: &PsiBlock<F>, t_psi: &PsiBlock<F>, cfg: &PenaltyConfig) -> Result<PsiBlock<F>> {
    if s_psi.dim() != t_psi.dim() {
        return Err(Error::Dimension("psi blocks differ in shape".into()));
    }
    let kappa = F::cst(cfg.lambda_h / cfg.rho);
    Ok((s_psi - t_psi).mapv(|x| scalar_soft_threshold(x, kappa)))
}

/// Network penalty evaluated through the difference operator, Σ_s √|N(s)|·‖(D_Θ b)_s‖.
pub fn p_n_from_blocks<F: Float>(blocks: &StationBlocks<F>, graph: &ProximityGraph) -> Result<F> {
    let ops = constraint_operators(graph, blocks.dims())?;
    let g = ops.apply_theta(blocks);
    let mut total = F::zero();
    for s in 0..graph.n_stations() {
        let norm = g.slice(ndarray::s![graph.group_rows(s), ..]).iter().map(|x| *x * *x).sum::<F>().sqrt();
        total += F::cst((graph.degree(s) as f64).sqrt()) * norm;
    }
    Ok(total)
}

/// Hourly penalty evaluated through the difference operator, ‖D_H b‖₁.
pub fn p_h_from_blocks<F: Float>(blocks: &StationBlocks<F>, graph: &ProximityGraph) -> Result<F> {
    let ops = constraint_operators(graph, blocks.dims())?;
    Ok(ops.apply_hour(blocks).iter().map(|x| x.abs()).sum())
}
