//! Small dense helpers shared by the numerical modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{FpcaError, Result};

/// Symmetric inverse square root via eigen-decomposition.
///
/// Fails if any eigenvalue is below `floor`.
pub fn sym_inv_sqrt(a: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min >= floor) {
        return Err(FpcaError::Basis(format!(
            "matrix is not safely positive definite (smallest eigenvalue {min:.3e})"
        )));
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&d) * v.transpose();
    Ok(symmetrize(out))
}

pub fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

/// Cholesky factor of a small SPD matrix with the inner-matrix
/// stabilization rule: if the factorization fails or its smallest pivot is
/// below `1e-12`, `jitter` is added to the diagonal once and the
/// factorization retried.
pub fn stabilized_cholesky(m: DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    const MIN_PIVOT: f64 = 1e-12;
    let ok = |c: &Cholesky<f64, Dyn>| {
        c.l_dirty()
            .diagonal()
            .iter()
            .all(|&d| d.is_finite() && d * d >= MIN_PIVOT)
    };
    if let Some(c) = Cholesky::new(m.clone()) {
        if ok(&c) {
            return Ok(c);
        }
    }
    let mut j = m;
    for i in 0..j.nrows() {
        j[(i, i)] += jitter;
    }
    match Cholesky::new(j) {
        Some(c) if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) => Ok(c),
        _ => Err(FpcaError::Numerical(
            "inner p x p matrix is not positive definite after stabilization".into(),
        )),
    }
}

/// `log det` from a Cholesky factor.
pub fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Weighted inner product `sum_j w_j a_j b_j`.
#[inline]
pub fn wdot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| w * x * y).sum()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
