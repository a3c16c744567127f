//! Euclidean projection onto the fusion constraint set
//! {(z, g, p) : g = D_Θ z, p = D_H z}.
//!
//! The projection solves (I + D_ΘᵀD_Θ + D_HᵀD_H) z = a + D_Θᵀg + D_Hᵀp.
//! Rotating the station dimension by the eigenvectors E of K = D_netᵀD_net
//! makes every station-indexed block diagonal; what remains is, per
//! eigenvalue κ_k, a small arrow system over (day interactions, θ, hour
//! interactions) coupled only through the shared hour effects. Ordered as
//! (day interactions, θ, hour interactions, shared hour effects) its Cholesky
//! factor is
//!
//! ```text
//! [ D11·I                              ]
//! [ D21·1ᵀ   D22                       ]
//! [ 0        D32·1   L33               ]
//! [ 0        0       L43      A44      ]
//! ```
//!
//! where L33 (Cholesky of a tridiagonal matrix minus a constant) has a
//! diagonal `d`, a subdiagonal `g`, and a constant fill `f_j` below the
//! subdiagonal of column j. Shared day-of-week effects do not enter any
//! constraint and pass through unchanged.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{constraint_operators, laplacian_eig, ProximityGraph};
use crate::linalg;
use crate::model::{ParamDims, StationBlocks};

/// Per-eigenvalue factor entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorBlocks<F> {
    pub d11: F,
    pub d21: F,
    pub d22: F,
    pub d32: F,
    /// Diagonal of L33.
    pub d: Vec<F>,
    /// Subdiagonal of L33.
    pub g: Vec<F>,
    /// Fill value of column j of L33 below the subdiagonal.
    pub f: Vec<F>,
}

impl<F: Float> FactorBlocks<F> {
    fn new(kappa: F, n_hours: usize, n_days: usize) -> Result<Self> {
        let one = F::one();
        let d11 = (one + kappa).sqrt();
        let d21 = kappa / d11;
        let d22sq = one + F::cst((n_hours + n_days) as f64) * kappa - F::cst((n_days - 1) as f64) * d21 * d21;
        if !(d22sq > F::zero()) {
            return Err(Error::Numerical(format!("projection factor breakdown at κ = {}", kappa.as_f64())));
        }
        let d22 = d22sq.sqrt();
        let d32 = kappa / d22;

        let n = n_hours - 1;
        let c = -(d32 * d32);
        let diag = F::cst(3.0) + kappa + c;
        let sub = -one + c;
        let (mut d, mut g, mut f) = (vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n]);
        // q = Σ_{m<j-1} f_m²
        let mut q = F::zero();
        for j in 0..n {
            if j >= 2 {
                q += f[j - 2] * f[j - 2];
            }
            let mut dsq = diag - q;
            let mut sigma = q;
            if j >= 1 {
                dsq -= g[j - 1] * g[j - 1];
                sigma += f[j - 1] * g[j - 1];
            }
            if !(dsq > F::zero()) {
                return Err(Error::Numerical(format!("hour-block factor breakdown at κ = {}", kappa.as_f64())));
            }
            d[j] = dsq.sqrt();
            g[j] = (sub - sigma) / d[j];
            f[j] = (c - sigma) / d[j];
        }
        Ok(Self { d11, d21, d22, d32, d, g, f })
    }

    /// Solves L33 y = r in place.
    fn l33_solve(&self, r: &mut [F]) {
        let n = r.len();
        let mut p = F::zero();
        for i in 0..n {
            if i >= 2 {
                p += self.f[i - 2] * r[i - 2];
            }
            let mut v = r[i] - p;
            if i >= 1 {
                v -= self.g[i - 1] * r[i - 1];
            }
            r[i] = v / self.d[i];
        }
    }

    /// Solves L33ᵀ x = y in place.
    fn l33t_solve(&self, y: &mut [F]) {
        let n = y.len();
        let mut suffix = F::zero();
        for j in (0..n).rev() {
            let mut v = y[j] - self.f[j] * suffix;
            if j + 1 < n {
                v -= self.g[j] * y[j + 1];
            }
            y[j] = v / self.d[j];
            if j + 1 < n {
                suffix += y[j + 1];
            }
        }
    }
}

/// T = tridiag(−1, 2, −1) applied to `x`.
fn tridiag_apply<F: Float>(x: &[F], out: &mut [F]) {
    let n = x.len();
    let two = F::cst(2.0);
    for i in 0..n {
        let mut v = two * x[i];
        if i > 0 {
            v -= x[i - 1];
        }
        if i + 1 < n {
            v -= x[i + 1];
        }
        out[i] = v;
    }
}

#[derive(Clone, Debug)]
enum Solver<F> {
    Structured {
        /// Eigenvectors of K as columns.
        eigvecs: Array2<F>,
        /// Eigenvalues of K = 4 × those of the scaled Laplacian.
        kappa: Vec<F>,
        /// Eᵀ·1.
        column_sums: Vec<F>,
        blocks: Vec<FactorBlocks<F>>,
        /// Cholesky factor of the shared-hour Schur complement.
        a44: Array2<F>,
    },
    Dense {
        chol: Array2<F>,
    },
}

/// Factorization of the projection system for one (graph, dims) pair,
/// reusable across iterations and penalty values.
#[derive(Clone, Debug)]
pub struct ProjectionPlan<F> {
    graph: ProximityGraph,
    dims: ParamDims,
    solver: Solver<F>,
}

/// Output of [`ProjectionPlan::project`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projected<F> {
    pub z: StationBlocks<F>,
    pub s_gamma: Array2<F>,
    pub s_psi: Array2<F>,
}

fn check_dims(graph: &ProximityGraph, dims: ParamDims) -> Result<()> {
    if graph.n_stations() != dims.n_stations || dims.n_hours < 2 || dims.n_days_of_week == 0 {
        return Err(Error::Dimension(format!("graph with {} stations vs dims {dims:?}", graph.n_stations())));
    }
    Ok(())
}

/// Structured plan from the Laplacian eigendecomposition.
pub fn build_plan<F: Float>(graph: &ProximityGraph, dims: ParamDims) -> Result<ProjectionPlan<F>> {
    check_dims(graph, dims)?;
    let eig = laplacian_eig(graph)?;
    let s_n = dims.n_stations;
    let n = dims.hod_free();
    let eigvecs = eig.eigenvectors.mapv(F::cst);
    let kappa: Vec<F> = eig.eigenvalues.iter().map(|&l| F::cst((4.0 * l).max(0.0))).collect();
    let column_sums: Vec<F> = eig.column_sums.iter().map(|&c| F::cst(c)).collect();
    let blocks = kappa
        .iter()
        .map(|&k| FactorBlocks::new(k, dims.n_hours, dims.n_days_of_week))
        .collect::<Result<Vec<_>>>()?;

    // A44 A44ᵀ = I + S·T − Σ_k c_k² T A33_k⁻¹ T
    let mut t = Array2::<F>::zeros((n, n));
    let mut col = vec![F::zero(); n];
    let mut tcol = vec![F::zero(); n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = F::zero());
        col[j] = F::one();
        tridiag_apply(&col, &mut tcol);
        for i in 0..n {
            t[[i, j]] = tcol[i];
        }
    }
    let mut schur = Array2::<F>::eye(n) + &(t.clone() * F::cst(s_n as f64));
    for (k, fb) in blocks.iter().enumerate() {
        let c2 = column_sums[k] * column_sums[k];
        if c2 == F::zero() {
            continue;
        }
        for j in 0..n {
            for i in 0..n {
                col[i] = t[[i, j]];
            }
            fb.l33_solve(&mut col);
            fb.l33t_solve(&mut col);
            tridiag_apply(&col, &mut tcol);
            for i in 0..n {
                schur[[i, j]] -= c2 * tcol[i];
            }
        }
    }
    let a44 = linalg::cholesky(&schur)?;
    Ok(ProjectionPlan {
        graph: graph.clone(),
        dims,
        solver: Solver::Structured { eigvecs, kappa, column_sums, blocks, a44 },
    })
}

/// Plan that assembles the full system matrix and factors it densely. Meant
/// for cross-checking on small instances: memory grows with the square of
/// S·(H + D).
pub fn build_dense_plan<F: Float>(graph: &ProximityGraph, dims: ParamDims) -> Result<ProjectionPlan<F>> {
    check_dims(graph, dims)?;
    let m = system_matrix::<F>(graph, dims)?;
    let chol = linalg::cholesky(&m)?;
    Ok(ProjectionPlan { graph: graph.clone(), dims, solver: Solver::Dense { chol } })
}

/// Dense I + D_ΘᵀD_Θ + D_HᵀD_H over the flat [`StationBlocks`] layout.
pub fn system_matrix<F: Float>(graph: &ProximityGraph, dims: ParamDims) -> Result<Array2<F>> {
    let ops = constraint_operators(graph, dims)?;
    let len = StationBlocks::<F>::zeros(dims).len();
    let mut m = Array2::<F>::zeros((len, len));
    let mut unit = vec![F::zero(); len];
    for j in 0..len {
        unit[j] = F::one();
        let e = StationBlocks::from_slice(dims, &unit)?;
        let mut col = ops.apply_theta_t(&ops.apply_theta(&e));
        col.axpy(F::one(), &ops.apply_hour_t(&ops.apply_hour(&e)));
        col.axpy(F::one(), &e);
        for (i, v) in col.iter().enumerate() {
            m[[i, j]] = *v;
        }
        unit[j] = F::zero();
    }
    Ok(m)
}

impl<F: Float> ProjectionPlan<F> {
    pub fn dims(&self) -> ParamDims {
        self.dims
    }

    pub fn graph(&self) -> &ProximityGraph {
        &self.graph
    }

    pub fn is_structured(&self) -> bool {
        matches!(self.solver, Solver::Structured { .. })
    }

    /// Factor entries for eigen-index `k` (structured plans only).
    pub fn factor_blocks(&self, k: usize) -> Option<&FactorBlocks<F>> {
        match &self.solver {
            Solver::Structured { blocks, .. } => blocks.get(k),
            Solver::Dense { .. } => None,
        }
    }

    /// Eigenvectors, eigenvalues of K, column sums and the Schur factor A44
    /// (structured plans only).
    pub fn rotation(&self) -> Option<(&Array2<F>, &[F], &[F], &Array2<F>)> {
        match &self.solver {
            Solver::Structured { eigvecs, kappa, column_sums, a44, .. } => {
                Some((eigvecs, kappa.as_slice(), column_sums.as_slice(), a44))
            }
            Solver::Dense { .. } => None,
        }
    }

    /// Solves (I + D_ΘᵀD_Θ + D_HᵀD_H) z = b.
    pub fn solve(&self, b: &StationBlocks<F>) -> Result<StationBlocks<F>> {
        if b.dims() != self.dims {
            return Err(Error::Dimension(format!("right-hand side {:?} vs plan {:?}", b.dims(), self.dims)));
        }
        match &self.solver {
            Solver::Dense { chol } => StationBlocks::from_slice(self.dims, &linalg::cholesky_solve(chol, &b.to_vec())),
            Solver::Structured { eigvecs, column_sums, blocks, a44, .. } => {
                Ok(self.solve_structured(b, eigvecs, column_sums, blocks, a44))
            }
        }
    }

    fn solve_structured(
        &self,
        b: &StationBlocks<F>,
        e: &Array2<F>,
        csum: &[F],
        blocks: &[FactorBlocks<F>],
        a44: &Array2<F>,
    ) -> StationBlocks<F> {
        let (s_n, n, dn) = (self.dims.n_stations, self.dims.hod_free(), self.dims.dow_free());
        let et = e.t();
        // rotated right-hand sides
        let mut y2: Array1<F> = et.dot(&b.theta);
        let mut y3: Array2<F> = et.dot(&b.hod_station);
        let mut y1: Array2<F> = et.dot(&b.dow_station);

        let mut acc = vec![F::zero(); n];
        let mut buf = vec![F::zero(); n];
        let mut tbuf = vec![F::zero(); n];
        for k in 0..s_n {
            let fb = &blocks[k];
            let mut sum1 = F::zero();
            for d in 0..dn {
                y1[[k, d]] /= fb.d11;
                sum1 += y1[[k, d]];
            }
            y2[k] = (y2[k] - fb.d21 * sum1) / fb.d22;
            let shift = fb.d32 * y2[k];
            let mut row = y3.row_mut(k);
            let r = row.as_slice_mut().expect("row-major");
            r.iter_mut().for_each(|v| *v -= shift);
            fb.l33_solve(r);
            if csum[k] != F::zero() {
                // L43_k y3_k = c_k T L33⁻ᵀ y3_k
                buf.copy_from_slice(r);
                fb.l33t_solve(&mut buf);
                tridiag_apply(&buf, &mut tbuf);
                for i in 0..n {
                    acc[i] += csum[k] * tbuf[i];
                }
            }
        }
        let mut x4: Vec<F> = b.hod.iter().zip(&acc).map(|(&r, &a)| r - a).collect();
        linalg::forward_subst(a44, &mut x4);
        linalg::backward_subst(a44, &mut x4);
        tridiag_apply(&x4, &mut tbuf);
        let tx4 = tbuf.clone();

        for k in 0..s_n {
            let fb = &blocks[k];
            let mut row = y3.row_mut(k);
            let r = row.as_slice_mut().expect("row-major");
            if csum[k] != F::zero() {
                // subtract L43_kᵀ x4 = c_k L33⁻¹ T x4
                buf.copy_from_slice(&tx4);
                fb.l33_solve(&mut buf);
                for i in 0..n {
                    r[i] -= csum[k] * buf[i];
                }
            }
            fb.l33t_solve(r);
            let sum3: F = r.iter().copied().sum();
            y2[k] = (y2[k] - fb.d32 * sum3) / fb.d22;
            for d in 0..dn {
                y1[[k, d]] = (y1[[k, d]] - fb.d21 * y2[k]) / fb.d11;
            }
        }

        StationBlocks {
            theta: e.dot(&y2),
            hod: Array1::from(x4),
            dow: b.dow.clone(),
            hod_station: e.dot(&y3),
            dow_station: e.dot(&y1),
        }
    }

    /// Projects (a, g, p) onto {g = D_Θ z, p = D_H z}. The returned
    /// auxiliaries are computed from `z`, so they satisfy the constraints by
    /// construction.
    pub fn project(&self, a: &StationBlocks<F>, gamma_target: &Array2<F>, psi_target: &Array2<F>) -> Result<Projected<F>> {
        let ops = constraint_operators(&self.graph, self.dims)?;
        if gamma_target.dim() != (self.graph.n_pairs(), ops.gamma_width())
            || psi_target.dim() != (self.dims.n_stations, self.dims.n_hours)
        {
            return Err(Error::Dimension(format!(
                "projection targets {:?}/{:?} do not match plan",
                gamma_target.dim(),
                psi_target.dim()
            )));
        }
        let mut b = ops.apply_theta_t(gamma_target);
        b.axpy(F::one(), &ops.apply_hour_t(psi_target));
        b.axpy(F::one(), a);
        let z = self.solve(&b)?;
        let s_gamma = ops.apply_theta(&z);
        let s_psi = ops.apply_hour(&z);
        Ok(Projected { z, s_gamma, s_psi })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_blocks(dims: ParamDims, seed: u64) -> StationBlocks<f64> {
        let len = StationBlocks::<f64>::zeros(dims).len();
        let v: Vec<f64> = (0..len).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0).collect();
        StationBlocks::from_slice(dims, &v).unwrap()
    }

    #[test]
    fn l33_recurrence_matches_dense_cholesky() {
        for &(kappa, h, d) in &[(0.0, 5, 3), (2.5, 6, 2), (7.0, 2, 1), (1.0, 24, 7)] {
            let fb = FactorBlocks::<f64>::new(kappa, h, d).unwrap();
            let n = h - 1;
            let c = -(fb.d32 * fb.d32);
            let a = Array2::from_shape_fn((n, n), |(i, j)| {
                let t = if i == j { 2.0 } else if i.abs_diff(j) == 1 { -1.0 } else { 0.0 };
                t + if i == j { 1.0 + kappa } else { 0.0 } + c
            });
            let l = linalg::cholesky(&a).unwrap();
            for i in 0..n {
                assert!((l[[i, i]] - fb.d[i]).abs() < 1e-12);
                if i + 1 < n {
                    assert!((l[[i + 1, i]] - fb.g[i]).abs() < 1e-12);
                }
                for r in i + 2..n {
                    assert!((l[[r, i]] - fb.f[i]).abs() < 1e-12);
                }
            }
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
            let mut x = rhs.clone();
            fb.l33_solve(&mut x);
            fb.l33t_solve(&mut x);
            let dense = linalg::cholesky_solve(&l, &rhs);
            for (u, v) in x.iter().zip(&dense) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_station_matches_dense() {
        let g = ProximityGraph::from_edges(1, &[]).unwrap();
        let dims = ParamDims::new(1, 4, 3);
        let plan = build_plan::<f64>(&g, dims).unwrap();
        let dense = build_dense_plan::<f64>(&g, dims).unwrap();
        let b = random_blocks(dims, 3);
        let (x, y) = (plan.solve(&b).unwrap(), dense.solve(&b).unwrap());
        assert!(x.dist_sq(&y).sqrt() < 1e-12);
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let g = ProximityGraph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let dims = ParamDims::new(3, 4, 2);
        let plan = build_plan::<f64>(&g, dims).unwrap();
        let a = StationBlocks::zeros(dims);
        let out = plan.project(&a, &Array2::zeros((4, 5)), &Array2::zeros((3, 4))).unwrap();
        assert_eq!(out.z, a);
        assert!(out.s_gamma.iter().all(|v| *v == 0.0));
    }
}
