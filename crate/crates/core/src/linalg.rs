use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{DamsError, Result};

/// Relative eigenvalue floor below which a normal matrix counts as singular.
pub const SINGULAR_RTOL: f64 = 1e-12;

/// `max|λ| / min|λ|` of a symmetric matrix (∞ when some eigenvalue is 0).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `m x = b` for symmetric `m`, refusing near-singular systems.
pub fn solve_symmetric(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    let cond = condition_number(m);
    if !cond.is_finite() || cond * SINGULAR_RTOL >= 1.0 {
        return Err(DamsError::Singular { condition: cond });
    }
    let x = match m.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => m
            .clone()
            .lu()
            .solve(b)
            .ok_or(DamsError::Singular { condition: cond })?,
    };
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(DamsError::Singular { condition: cond })
    }
}

/// Principal submatrix on `keep`.
pub fn submatrix(m: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(keep.len(), keep.len(), |i, j| m[(keep[i], keep[j])])
}
