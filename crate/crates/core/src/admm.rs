//! ADMM for the penalized Poisson objective.
//!
//! Primal variables are the model parameters plus the network and hourly
//! auxiliaries (Γ, Ψ). The consensus copy `z` and the projected auxiliaries
//! (S_Γ, S_Ψ) are kept on the constraint set by [`ProjectionPlan::project`].
//! Duals are scaled by 1/ρ.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::RentalPanel;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{constraint_operators, ConstraintOps, ProximityGraph};
use crate::model::{initial_params, Design, ParamDims, ParamState, StationBlocks, MU_FLOOR};
use crate::penalty::{objective, update_gamma, update_psi, GammaBlock, PenaltyConfig, PsiBlock};
use crate::projection::ProjectionPlan;

/// Keeps coordinate updates well defined for columns with no weight.
const CD_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmOptions {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Proximal Newton passes per primal update.
    pub newton_passes: usize,
    /// Coordinate descent stops once no coordinate moves the quadratic
    /// model by more than this.
    pub inner_tol: f64,
    pub max_sweeps: usize,
    pub adapt_rho: bool,
    /// Rebalance ρ when one residual exceeds the other by this factor.
    pub adapt_ratio: f64,
    pub adapt_factor: f64,
    /// No ρ changes after this many iterations.
    pub adapt_until: usize,
    /// Iterations between ρ updates; back-to-back updates make the
    /// residuals oscillate.
    pub adapt_every: usize,
    /// Snap the estimate onto the fusion pattern found by the solver.
    pub polish: bool,
    /// Without fusion penalties the problem is a Lasso GLM, solved directly
    /// by proximal Newton.
    pub direct_without_fusion: bool,
    /// Relative stopping tolerance of the direct solve.
    pub direct_tol: f64,
    /// Coordinate descent sweep cap per pass of the direct solve.
    pub direct_max_sweeps: usize,
    /// Progress line every this many iterations; 0 logs only the last one.
    pub log_every: usize,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            eps_abs: 1e-5,
            eps_rel: 1e-4,
            max_iter: 2000,
            newton_passes: 3,
            inner_tol: 1e-9,
            max_sweeps: 1000,
            adapt_rho: true,
            adapt_ratio: 10.0,
            adapt_factor: 2.0,
            adapt_until: 500,
            adapt_every: 10,
            polish: true,
            direct_without_fusion: true,
            direct_tol: 1e-20,
            direct_max_sweeps: 100_000,
            log_every: 10,
        }
    }
}

impl AdmmOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.eps_abs) && pos(self.eps_rel) && pos(self.inner_tol) && pos(self.direct_tol)) {
            return Err(Error::Validation("solver tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.newton_passes == 0 || self.max_sweeps == 0 || self.direct_max_sweeps == 0 {
            return Err(Error::Validation("iteration limits must be at least 1".into()));
        }
        if !(self.adapt_ratio > 1.0 && self.adapt_factor > 1.0) {
            return Err(Error::Validation("rho adaptation ratio and factor must exceed 1".into()));
        }
        Ok(())
    }
}

/// Residual norms and tolerances of one iteration.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
}

impl Residuals {
    pub fn converged(&self) -> bool {
        self.primal <= self.eps_primal && self.dual <= self.eps_dual
    }
}

#[derive(Clone, Debug)]
pub struct AdmmState<F> {
    /// Primal parameters; the first station's interactions stay at zero.
    pub params: ParamState<F>,
    pub gamma: GammaBlock<F>,
    pub psi: PsiBlock<F>,
    pub z: StationBlocks<F>,
    pub s_gamma: GammaBlock<F>,
    pub s_psi: PsiBlock<F>,
    pub u: StationBlocks<F>,
    pub t_gamma: GammaBlock<F>,
    pub t_psi: PsiBlock<F>,
    pub rho: f64,
    pub iteration: usize,
    pub history: Vec<Residuals>,
    /// Penalty the duals belong to; set when a solve finishes.
    pub penalty: Option<PenaltyConfig>,
}

impl<F: Float> AdmmState<F> {
    /// Consistent state around `params` with zero duals.
    pub fn from_params(params: ParamState<F>, ops: &ConstraintOps<'_>, rho: f64) -> Self {
        let z = StationBlocks::from_params(&params);
        let s_gamma = ops.apply_theta(&z);
        let s_psi = ops.apply_hour(&z);
        Self {
            params,
            gamma: s_gamma.clone(),
            psi: s_psi.clone(),
            u: StationBlocks::zeros(z.dims()),
            t_gamma: Array2::zeros(s_gamma.dim()),
            t_psi: Array2::zeros(s_psi.dim()),
            z,
            s_gamma,
            s_psi,
            rho,
            iteration: 0,
            history: Vec::new(),
            penalty: None,
        }
    }

    pub fn check(&self, ops: &ConstraintOps<'_>) -> Result<()> {
        self.params.validate()?;
        let g = (ops.graph.n_pairs(), ops.gamma_width());
        let p = (ops.dims.n_stations, ops.dims.n_hours);
        let ok = self.params.dims() == ops.dims
            && self.z.dims() == ops.dims
            && self.u.dims() == ops.dims
            && [self.gamma.dim(), self.s_gamma.dim(), self.t_gamma.dim()].iter().all(|d| *d == g)
            && [self.psi.dim(), self.s_psi.dim(), self.t_psi.dim()].iter().all(|d| *d == p);
        if !ok {
            return Err(Error::Dimension(format!("solver state does not match dims {:?}", ops.dims)));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Validation(format!("state rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    fn primal_norm_sq(&self) -> F {
        StationBlocks::from_params(&self.params).norm_sq() + sum_sq(&self.gamma) + sum_sq(&self.psi)
    }

    fn aux_norm_sq(&self) -> F {
        self.z.norm_sq() + sum_sq(&self.s_gamma) + sum_sq(&self.s_psi)
    }

    fn dual_norm_sq(&self) -> F {
        self.u.norm_sq() + sum_sq(&self.t_gamma) + sum_sq(&self.t_psi)
    }

    fn n_coords(&self) -> usize {
        self.z.len() + self.gamma.len() + self.psi.len()
    }

    /// The optimal scaled dual of a fusion block is its penalty weight times
    /// a subgradient, over ρ; moving to new weights rescales it accordingly.
    fn retarget_duals(&mut self, cfg: &PenaltyConfig) {
        if let Some(old) = self.penalty {
            if old.lambda_n > 0.0 {
                let a = F::cst(cfg.lambda_n / old.lambda_n);
                self.t_gamma.mapv_inplace(|v| v * a);
            }
            if old.lambda_h > 0.0 {
                let a = F::cst(cfg.lambda_h / old.lambda_h);
                self.t_psi.mapv_inplace(|v| v * a);
            }
        }
        self.penalty = Some(*cfg);
    }

    fn scale_duals(&mut self, a: F) {
        self.u.scale(a);
        self.t_gamma.mapv_inplace(|v| v * a);
        self.t_psi.mapv_inplace(|v| v * a);
    }
}

fn sum_sq<F: Float>(a: &Array2<F>) -> F {
    a.iter().map(|v| *v * *v).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Penalized objective at the returned estimate.
    pub objective: f64,
    pub converged: bool,
    pub rho: f64,
    /// Primal updates whose inner coordinate descent hit the sweep limit.
    pub inner_limit_hits: usize,
}

#[derive(Clone, Debug)]
pub struct AdmmOutput<F> {
    pub params: ParamState<F>,
    pub report: SolveReport,
    /// Final iterate, usable as a warm start.
    pub state: AdmmState<F>,
}

#[derive(Serialize)]
struct ProgressLine {
    iteration: usize,
    primal_residual: f64,
    dual_residual: f64,
    eps_primal: f64,
    eps_dual: f64,
    rho: f64,
    objective: f64,
}

/// Outcome of one proximal Newton run.
#[derive(Copy, Clone, Debug, Default)]
pub struct InnerStats {
    pub passes: usize,
    pub sweeps: usize,
    pub sweep_limit_hit: bool,
    pub converged: bool,
    /// Subproblem objective at exit.
    pub objective: f64,
}

/// Per-coordinate data of the proximal subproblem
/// NLL(β) + Σ_j λ_j|β_j| + ½ Σ_j w_j (β_j − c_j)².
struct Subproblem<'b, F> {
    lambda: &'b [F],
    weight: &'b [F],
    center: &'b [F],
}

impl<F: Float> Subproblem<'_, F> {
    fn value(&self, b: &[F]) -> F {
        let half = F::cst(0.5);
        let mut total = F::zero();
        for j in 0..b.len() {
            let d = b[j] - self.center[j];
            total += self.lambda[j] * b[j].abs() + half * self.weight[j] * d * d;
        }
        total
    }
}

/// Problem data shared by all iterations of a solve.
pub struct AdmmProblem<'a, F> {
    panel: &'a RentalPanel,
    plan: &'a ProjectionPlan<F>,
    ops: ConstraintOps<'a>,
    design: Design<F>,
    dims: ParamDims,
    /// Flat parameter column → consensus position, for columns tied to the
    /// consensus copy.
    block_pos: Vec<Option<usize>>,
    interaction: Vec<bool>,
}

impl<'a, F: Float> AdmmProblem<'a, F> {
    pub fn new(panel: &'a RentalPanel, plan: &'a ProjectionPlan<F>) -> Result<Self> {
        let dims = ParamDims::of_panel(panel);
        if dims != plan.dims() {
            return Err(Error::Dimension(format!("panel dims {dims:?} vs projection plan {:?}", plan.dims())));
        }
        let ops = constraint_operators(plan.graph(), dims)?;
        let design = Design::new(panel);
        let (s_n, h1, d1) = (dims.n_stations, dims.hod_free(), dims.dow_free());
        let hs_base = s_n + h1 + d1;
        let ds_base = hs_base + s_n * h1;
        let block_pos = (0..dims.n_free())
            .map(|j| {
                if j < dims.off_hod() || (j >= dims.off_dow() && j < dims.off_theta()) {
                    // covariate effects and shared day-of-week effects have no
                    // constraint columns, so they are left out of the consensus
                    None
                } else if j < dims.off_dow() {
                    Some(s_n + j - dims.off_hod())
                } else if j < dims.off_hod_station() {
                    Some(j - dims.off_theta())
                } else if j < dims.off_dow_station() {
                    let k = j - dims.off_hod_station();
                    Some(hs_base + (1 + k / h1) * h1 + k % h1)
                } else {
                    let k = j - dims.off_dow_station();
                    Some(ds_base + (1 + k / d1) * d1 + k % d1)
                }
            })
            .collect();
        let interaction = (0..dims.n_free()).map(|j| dims.is_interaction(j)).collect();
        Ok(Self { panel, plan, ops, design, dims, block_pos, interaction })
    }

    pub fn graph(&self) -> &ProximityGraph {
        self.plan.graph()
    }

    pub fn ops(&self) -> &ConstraintOps<'a> {
        &self.ops
    }

    /// Cold start: station intercepts at their empirical log-rates.
    pub fn cold_state(&self, rho: f64) -> AdmmState<F> {
        AdmmState::from_params(initial_params(self.panel), &self.ops, rho)
    }

    fn lambda_vec(&self, lambda: f64) -> Vec<F> {
        let l = F::cst(lambda);
        self.interaction.iter().map(|&i| if i { l } else { F::zero() }).collect()
    }

    /// Step 1: parameters by proximal Newton on NLL + λ‖·‖₁ + ρ/2‖x − (z − u)‖²,
    /// then Γ and Ψ by their proximal maps.
    pub fn step1_primal(&self, state: &mut AdmmState<F>, cfg: &PenaltyConfig, opts: &AdmmOptions) -> Result<InnerStats> {
        let rho = F::cst(state.rho);
        let mut target = state.z.clone();
        target.axpy(-F::one(), &state.u);
        let tv = target.to_vec();
        let center: Vec<F> = self.block_pos.iter().map(|p| p.map_or(F::zero(), |k| tv[k])).collect();
        let weight: Vec<F> = self.block_pos.iter().map(|p| if p.is_some() { rho } else { F::zero() }).collect();
        let lambda = self.lambda_vec(cfg.lambda);
        let sub = Subproblem { lambda: &lambda, weight: &weight, center: &center };
        let mut beta = state.params.to_flat();
        let stats = self.prox_newton(&mut beta, &sub, opts.newton_passes, opts.inner_tol, opts.max_sweeps);
        if stats.sweep_limit_hit {
            log::debug!("primal update hit the sweep limit at iteration {}", state.iteration);
        }
        state.params = ParamState::from_flat(self.dims, &beta)?;
        let scaled = PenaltyConfig { rho: state.rho, ..*cfg };
        state.gamma = update_gamma(&state.s_gamma, &state.t_gamma, &scaled, self.graph())?;
        state.psi = update_psi(&state.s_psi, &state.t_psi, &scaled)?;
        Ok(stats)
    }

    /// Step 2: projection of (x + u, Γ + T_Γ, Ψ + T_Ψ) onto the constraint set.
    pub fn step2_project(&self, state: &mut AdmmState<F>) -> Result<()> {
        let mut a = StationBlocks::from_params(&state.params);
        a.axpy(F::one(), &state.u);
        let out = self.plan.project(&a, &(&state.gamma + &state.t_gamma), &(&state.psi + &state.t_psi))?;
        state.z = out.z;
        state.s_gamma = out.s_gamma;
        state.s_psi = out.s_psi;
        Ok(())
    }

    /// Minimizes the subproblem in place. Each pass builds the quadratic
    /// model of the NLL at β, minimizes it with the penalty terms by cyclic
    /// coordinate descent, and backtracks on the true subproblem objective.
    fn prox_newton(&self, beta: &mut [F], sub: &Subproblem<'_, F>, passes: usize, tol: f64, max_sweeps: usize) -> InnerStats {
        let d = &self.design;
        let n = d.n_obs();
        let p = beta.len();
        let floor = F::cst(MU_FLOOR);
        let eps = F::cst(CD_EPS);
        let mut eta = d.eta(beta);
        let mut f_cur = d.neg_loglik_at(&eta) + sub.value(beta);
        let mut stats = InnerStats::default();
        let mut w = vec![F::zero(); n];
        let mut grad_r = vec![F::zero(); n];
        let mut r0 = vec![F::zero(); n];
        let mut curv = vec![F::zero(); p];
        let mut active = vec![false; p];

        for _ in 0..passes {
            stats.passes += 1;
            for i in 0..n {
                let mu = d.log_mu(i, eta[i]).exp();
                w[i] = mu.max(floor);
                grad_r[i] = mu - d.y[i];
                r0[i] = (d.y[i] - mu) / w[i];
            }
            for (j, c) in curv.iter_mut().enumerate() {
                let (rows, vals) = d.column(j);
                *c = rows.iter().zip(vals).map(|(&i, &v)| w[i] * v * v).sum::<F>() + eps;
            }
            let mut r = r0.clone();
            let mut b = beta.to_vec();

            // returns the largest (curvature-weighted) squared move
            let update = |j: usize, b: &mut [F], r: &mut [F]| -> F {
                let (rows, vals) = d.column(j);
                let mut g = F::zero();
                for (&i, &v) in rows.iter().zip(vals) {
                    g += w[i] * v * r[i];
                }
                let num = g + curv[j] * b[j] + sub.weight[j] * sub.center[j];
                let den = curv[j] + sub.weight[j];
                let lj = sub.lambda[j];
                let nb = if num > lj {
                    (num - lj) / den
                } else if num < -lj {
                    (num + lj) / den
                } else {
                    F::zero()
                };
                let delta = nb - b[j];
                if delta != F::zero() {
                    for (&i, &v) in rows.iter().zip(vals) {
                        r[i] -= v * delta;
                    }
                    b[j] = nb;
                }
                den * delta * delta
            };

            let tol_f = F::cst(tol);
            let mut sweeps = 0;
            let mut first_change = F::zero();
            'outer: loop {
                let mut change = F::zero();
                for j in 0..p {
                    change = change.max(update(j, &mut b, &mut r));
                    active[j] = b[j] != F::zero() || sub.lambda[j] == F::zero();
                }
                if sweeps == 0 {
                    first_change = change;
                }
                sweeps += 1;
                if change <= tol_f {
                    break;
                }
                loop {
                    if sweeps >= max_sweeps {
                        stats.sweep_limit_hit = true;
                        break 'outer;
                    }
                    let mut change = F::zero();
                    for j in (0..p).filter(|&j| active[j]) {
                        change = change.max(update(j, &mut b, &mut r));
                    }
                    sweeps += 1;
                    if change <= tol_f {
                        break;
                    }
                }
            }
            stats.sweeps += sweeps;

            // X·(b − β) from the residual change
            let xd: Vec<F> = r0.iter().zip(&r).map(|(a, c)| *a - *c).collect();
            let lin: F = grad_r.iter().zip(&xd).map(|(g, x)| *g * *x).sum();
            let pen_old = sub.value(beta);
            let decrease = lin + sub.value(&b) - pen_old;
            if !(decrease < F::zero()) {
                stats.converged = true;
                break;
            }
            let mut t = F::one();
            let mut accepted = false;
            for _ in 0..30 {
                let eta_t: Vec<F> = eta.iter().zip(&xd).map(|(e, x)| *e + t * *x).collect();
                let b_t: Vec<F> = beta.iter().zip(&b).map(|(o, nw)| *o + t * (*nw - *o)).collect();
                let f_t = d.neg_loglik_at(&eta_t) + sub.value(&b_t);
                if f_t <= f_cur + F::cst(1e-4) * t * decrease {
                    beta.copy_from_slice(&b_t);
                    eta = eta_t;
                    f_cur = f_t;
                    accepted = true;
                    break;
                }
                t *= F::cst(0.5);
            }
            if !accepted || first_change <= tol_f {
                // a rejected step whose predicted decrease is rounding noise
                let noise = F::cst(64.0 * f64::EPSILON) * f_cur.abs().max(F::one());
                stats.converged = accepted || first_change <= tol_f || -decrease <= noise;
                break;
            }
        }
        stats.objective = f_cur.as_f64();
        stats
    }

    /// Direct proximal Newton solve of NLL + λ‖interactions‖₁.
    fn solve_unfused(&self, cfg: &PenaltyConfig, opts: &AdmmOptions, warm: Option<&AdmmState<F>>) -> Result<AdmmOutput<F>> {
        let mut beta = match warm {
            Some(w) => w.params.to_flat(),
            None => initial_params::<F>(self.panel).to_flat(),
        };
        let lambda = self.lambda_vec(cfg.lambda);
        let zeros = vec![F::zero(); beta.len()];
        let sub = Subproblem { lambda: &lambda, weight: &zeros, center: &zeros };
        let f0 = self.design.neg_loglik_at(&self.design.eta(&beta)) + sub.value(&beta);
        let tol = opts.direct_tol * f0.as_f64().abs().max(1.0);
        let stats = self.prox_newton(&mut beta, &sub, opts.max_iter.min(500), tol, opts.direct_max_sweeps);
        let params = ParamState::from_flat(self.dims, &beta)?;
        let obj = objective(&params, self.panel, self.graph(), cfg)?.as_f64();
        let mut state = AdmmState::from_params(params.clone(), &self.ops, warm.map_or(cfg.rho, |w| w.rho));
        state.iteration = stats.passes;
        let report = SolveReport {
            iterations: stats.passes,
            primal_residual: 0.0,
            dual_residual: 0.0,
            objective: obj,
            converged: stats.converged,
            rho: state.rho,
            inner_limit_hits: usize::from(stats.sweep_limit_hit),
        };
        Ok(AdmmOutput { params, report, state })
    }

    /// Runs the ADMM iterations from `warm` (or a cold start) until both
    /// residuals meet their tolerances or `max_iter` is reached. Progress
    /// lines go to `log` as JSON objects, one per line.
    pub fn solve(
        &self,
        cfg: &PenaltyConfig,
        opts: &AdmmOptions,
        warm: Option<&AdmmState<F>>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<AdmmOutput<F>> {
        cfg.validate()?;
        opts.validate()?;
        if let Some(w) = warm {
            w.check(&self.ops)?;
        }
        if opts.direct_without_fusion && cfg.lambda_n == 0.0 && cfg.lambda_h == 0.0 {
            let out = self.solve_unfused(cfg, opts, warm)?;
            if let Some(sink) = log.as_deref_mut() {
                write_progress(
                    sink,
                    &ProgressLine {
                        iteration: out.report.iterations,
                        primal_residual: 0.0,
                        dual_residual: 0.0,
                        eps_primal: 0.0,
                        eps_dual: 0.0,
                        rho: out.report.rho,
                        objective: out.report.objective,
                    },
                )?;
            }
            return Ok(out);
        }

        let mut state = match warm {
            Some(w) => {
                let mut s = w.clone();
                s.iteration = 0;
                s.history.clear();
                s.retarget_duals(cfg);
                s
            }
            None => {
                let mut s = self.cold_state(cfg.rho);
                s.penalty = Some(*cfg);
                s
            }
        };
        let mut inner_limit_hits = 0;
        let mut converged = false;
        let mut last = Residuals { primal: f64::INFINITY, dual: f64::INFINITY, eps_primal: 0.0, eps_dual: 0.0 };
        let sqrt_p = (state.n_coords() as f64).sqrt();

        for k in 1..=opts.max_iter {
            state.iteration = k;
            let stats = self.step1_primal(&mut state, cfg, opts)?;
            inner_limit_hits += usize::from(stats.sweep_limit_hit);
            let z_prev = state.z.clone();
            let sg_prev = state.s_gamma.clone();
            let sp_prev = state.s_psi.clone();
            self.step2_project(&mut state)?;
            let primal = step3_dual(&mut state).as_f64();
            let dual_sq = state.z.dist_sq(&z_prev) + sum_sq(&(&state.s_gamma - &sg_prev)) + sum_sq(&(&state.s_psi - &sp_prev));
            let rho = state.rho;
            let res = Residuals {
                primal,
                dual: rho * dual_sq.as_f64().sqrt(),
                eps_primal: sqrt_p * opts.eps_abs
                    + opts.eps_rel * state.primal_norm_sq().as_f64().sqrt().max(state.aux_norm_sq().as_f64().sqrt()),
                eps_dual: sqrt_p * opts.eps_abs + opts.eps_rel * rho * state.dual_norm_sq().as_f64().sqrt(),
            };
            if !(res.primal.is_finite() && res.dual.is_finite()) {
                return Err(Error::Numerical(format!("ADMM residuals became non-finite at iteration {k}")));
            }
            state.history.push(res);
            last = res;
            converged = res.converged();
            let done = converged || k == opts.max_iter;
            if let Some(sink) = log.as_deref_mut() {
                if done || (opts.log_every > 0 && k % opts.log_every == 0) {
                    let obj = objective(&state.params, self.panel, self.graph(), cfg)?.as_f64();
                    write_progress(
                        sink,
                        &ProgressLine {
                            iteration: k,
                            primal_residual: res.primal,
                            dual_residual: res.dual,
                            eps_primal: res.eps_primal,
                            eps_dual: res.eps_dual,
                            rho,
                            objective: obj,
                        },
                    )?;
                }
            }
            if done {
                break;
            }
            if opts.adapt_rho && k < opts.adapt_until && k % opts.adapt_every.max(1) == 0 {
                let tau = opts.adapt_factor;
                if res.primal > opts.adapt_ratio * res.dual {
                    state.rho *= tau;
                    state.scale_duals(F::cst(1.0 / tau));
                } else if res.dual > opts.adapt_ratio * res.primal {
                    state.rho /= tau;
                    state.scale_duals(F::cst(tau));
                }
            }
        }
        if !converged {
            log::warn!(
                "ADMM stopped after {} iterations without converging (primal {:.3e}/{:.3e}, dual {:.3e}/{:.3e})",
                opts.max_iter,
                last.primal,
                last.eps_primal,
                last.dual,
                last.eps_dual
            );
        }

        let params = self.final_estimate(&state, opts.polish)?;
        let obj = objective(&params, self.panel, self.graph(), cfg)?.as_f64();
        let report = SolveReport {
            iterations: state.iteration,
            primal_residual: last.primal,
            dual_residual: last.dual,
            objective: obj,
            converged,
            rho: state.rho,
            inner_limit_hits,
        };
        Ok(AdmmOutput { params, report, state })
    }

    /// Consensus blocks with the primal's exact zeros and unconstrained
    /// coordinates imposed, optionally polished onto the fusion pattern.
    pub fn final_estimate(&self, state: &AdmmState<F>, polish: bool) -> Result<ParamState<F>> {
        let xc = StationBlocks::from_params(&state.params);
        let mut blocks = state.z.clone();
        blocks.dow.assign(&xc.dow);
        let mut free = vec![true; blocks.len()];
        {
            let offset = blocks.theta.len() + blocks.hod.len() + blocks.dow.len();
            let xv = xc.to_vec();
            for (k, (slot, x)) in blocks.iter_mut().zip(&xv).enumerate().skip(offset) {
                if *x == F::zero() {
                    *slot = F::zero();
                    free[k] = false;
                }
            }
        }
        if polish {
            let s_n = self.dims.n_stations;
            let width = self.ops.gamma_width();
            let mut gamma_rows = vec![false; self.graph().n_pairs()];
            for s in 0..s_n {
                let rows = self.graph().group_rows(s);
                let zero = state.gamma.slice(ndarray::s![rows.clone(), ..]).iter().all(|v| *v == F::zero());
                if zero && !rows.is_empty() {
                    gamma_rows[rows].iter_mut().for_each(|r| *r = true);
                }
            }
            let psi_mask = state.psi.mapv(|v| v == F::zero());
            if width > 0 && (gamma_rows.iter().any(|&r| r) || psi_mask.iter().any(|&m| m)) {
                let resid = polish_onto(&self.ops, &mut blocks, &free, &gamma_rows, &psi_mask);
                if resid > 1e-8 {
                    log::warn!("fusion polish left constraint residual {resid:.3e}");
                } else {
                    log::debug!("fusion polish residual {resid:.3e}");
                }
            }
        }
        Ok(blocks.to_params(state.params.effects))
    }
}

/// Step 3: u += x − z, T += (Γ, Ψ) − S. Returns the primal residual norm.
pub fn step3_dual<F: Float>(state: &mut AdmmState<F>) -> F {
    let mut r = StationBlocks::from_params(&state.params);
    r.axpy(-F::one(), &state.z);
    let rg = &state.gamma - &state.s_gamma;
    let rp = &state.psi - &state.s_psi;
    state.u.axpy(F::one(), &r);
    state.t_gamma += &rg;
    state.t_psi += &rp;
    (r.norm_sq() + sum_sq(&rg) + sum_sq(&rp)).sqrt()
}

fn write_progress(sink: &mut dyn Write, line: &ProgressLine) -> Result<()> {
    let text = serde_json::to_string(line)?;
    writeln!(sink, "{text}").map_err(|e| Error::io("<solve log>", e))
}

/// Moves `blocks` to the nearest point (over free coordinates) where the
/// selected network rows and hourly differences vanish. Returns the norm of
/// the remaining selected constraint values.
fn polish_onto<F: Float>(
    ops: &ConstraintOps<'_>,
    blocks: &mut StationBlocks<F>,
    free: &[bool],
    gamma_rows: &[bool],
    psi_mask: &Array2<bool>,
) -> f64 {
    let dims = ops.dims;
    let width = ops.gamma_width();
    let n_g = gamma_rows.len() * width;
    let apply = |b: &StationBlocks<F>| -> Vec<F> {
        let g = ops.apply_theta(b);
        let p = ops.apply_hour(b);
        let mut out = Vec::with_capacity(n_g + p.len());
        for (row, sel) in gamma_rows.iter().enumerate() {
            for c in 0..width {
                out.push(if *sel { g[[row, c]] } else { F::zero() });
            }
        }
        out.extend(p.iter().zip(psi_mask.iter()).map(|(v, m)| if *m { *v } else { F::zero() }));
        out
    };
    let apply_t = |y: &[F]| -> StationBlocks<F> {
        let g = Array2::from_shape_vec((gamma_rows.len(), width), y[..n_g].to_vec()).expect("sized above");
        let p = Array2::from_shape_vec((dims.n_stations, dims.n_hours), y[n_g..].to_vec()).expect("sized above");
        let mut b = ops.apply_theta_t(&g);
        b.axpy(F::one(), &ops.apply_hour_t(&p));
        for (v, f) in b.iter_mut().zip(free) {
            if !*f {
                *v = F::zero();
            }
        }
        b
    };
    let dot = |a: &[F], b: &[F]| -> F { a.iter().zip(b).map(|(x, y)| *x * *y).sum() };

    // The selected rows are redundant (each pair appears in both directions,
    // cyclic hour differences sum to zero), so the system is singular but
    // consistent. CG stays in the range as long as it stops before rounding
    // noise dominates; the best iterate is kept.
    let rhs = apply(blocks);
    let scale = blocks.norm_sq().as_f64().max(1.0);
    let stop = F::cst(1e-26 * scale);
    let mut y = vec![F::zero(); rhs.len()];
    let mut best = (dot(&rhs, &rhs), y.clone());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rs = best.0;
    for _ in 0..(2 * rhs.len()).max(50) {
        if rs <= stop {
            break;
        }
        let ap = apply(&apply_t(&p));
        let pap = dot(&p, &ap);
        if !(pap > F::zero()) {
            break;
        }
        let alpha = rs / pap;
        for i in 0..y.len() {
            y[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        if rs_new < best.0 {
            best = (rs_new, y.clone());
        } else if rs_new > F::cst(1e4) * best.0 {
            break;
        }
        let beta = rs_new / rs;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    let mut out = blocks.clone();
    out.axpy(-F::one(), &apply_t(&best.1));
    let after = apply(&out);
    let resid = dot(&after, &after).as_f64().sqrt();
    let before = dot(&rhs, &rhs).as_f64().sqrt();
    if resid <= before {
        *blocks = out;
        resid
    } else {
        before
    }
}

/// Convenience wrapper: builds the problem and solves it.
pub fn solve<F: Float>(
    panel: &RentalPanel,
    plan: &ProjectionPlan<F>,
    cfg: &PenaltyConfig,
    opts: &AdmmOptions,
    warm: Option<&AdmmState<F>>,
    log: Option<&mut dyn Write>,
) -> Result<AdmmOutput<F>> {
    AdmmProblem::new(panel, plan)?.solve(cfg, opts, warm, log)
}
