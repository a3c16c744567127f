//! Small dense helpers: Cholesky factorization and triangular solves for
//! generic scalars.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::float::Float;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<F: Float>(a: &Array2<F>) -> Result<Array2<F>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("cholesky of non-square {:?}", a.dim())));
    }
    let mut l = Array2::<F>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > F::zero()) {
            return Err(Error::Numerical(format!(
                "matrix not positive definite at pivot {j} (value {})",
                d.as_f64()
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(l)
}

/// Solves L y = b in place.
pub fn forward_subst<F: Float>(l: &Array2<F>, b: &mut [F]) {
    for i in 0..b.len() {
        let mut v = b[i];
        for k in 0..i {
            v -= l[[i, k]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
}

/// Solves Lᵀ x = b in place.
pub fn backward_subst<F: Float>(l: &Array2<F>, b: &mut [F]) {
    for i in (0..b.len()).rev() {
        let mut v = b[i];
        for k in i + 1..b.len() {
            v -= l[[k, i]] * b[k];
        }
        b[i] = v / l[[i, i]];
    }
}

/// Solves (L Lᵀ) x = b.
pub fn cholesky_solve<F: Float>(l: &Array2<F>, b: &[F]) -> Vec<F> {
    let mut x = b.to_vec();
    forward_subst(l, &mut x);
    backward_subst(l, &mut x);
    x
}

/// Solves (L Lᵀ) X = B column by column.
pub fn cholesky_solve_mat<F: Float>(l: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut x = b.clone();
    let mut col = vec![F::zero(); b.nrows()];
    for j in 0..b.ncols() {
        for i in 0..b.nrows() {
            col[i] = b[[i, j]];
        }
        forward_subst(l, &mut col);
        backward_subst(l, &mut col);
        for i in 0..b.nrows() {
            x[[i, j]] = col[i];
        }
    }
    x
}
