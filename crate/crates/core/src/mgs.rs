//! Weighted modified Gram-Schmidt map `U -> Phi` and its derivatives.
//!
//! The map orthonormalizes the columns of `U` under `<f, g>_w = f^T W g`,
//! so that `Phi^T W Phi = I_p`. The triangular factor `R` with `U = Phi R`
//! is kept for the forward (Jacobian-vector) and reverse (vector-Jacobian)
//! derivatives.

use nalgebra::DMatrix;

use crate::basis::{BasisSystem, QuadratureGrid};
use crate::error::{FpcaError, Result};
use crate::linalg::wdot;

/// Relative residual norm below which a column counts as dependent.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Output of [`mgs_orthonormalize`].
#[derive(Debug, Clone)]
pub struct OrthoFrame {
    /// `M x p` grid values of the orthonormal functions.
    pub phi: DMatrix<f64>,
    /// Upper-triangular `p x p` factor with `U = Phi R`; the diagonal holds
    /// the residual norms `||w_k||_w`.
    pub r: DMatrix<f64>,
}

impl OrthoFrame {
    pub fn p(&self) -> usize {
        self.phi.ncols()
    }
}

/// Orthonormalizes the columns of `u` under the grid's quadrature weights.
pub fn mgs_orthonormalize(u: &DMatrix<f64>, grid: &QuadratureGrid) -> Result<OrthoFrame> {
    let w = grid.weights();
    let (m, p) = u.shape();
    if m != w.len() {
        return Err(FpcaError::Mgs(format!(
            "matrix has {m} rows but the grid has {} points",
            w.len()
        )));
    }
    let mut phi = DMatrix::<f64>::zeros(m, p);
    let mut r = DMatrix::<f64>::zeros(p, p);
    let mut v = vec![0.0; m];
    for k in 0..p {
        v.copy_from_slice(u.column(k).as_slice());
        let input_norm = wdot(&v, &v, w).sqrt();
        for j in 0..k {
            let pj = phi.column(j);
            let c = wdot(&v, pj.as_slice(), w);
            r[(j, k)] = c;
            for (vi, qi) in v.iter_mut().zip(pj.iter()) {
                *vi -= c * qi;
            }
        }
        let norm = wdot(&v, &v, w).sqrt();
        if !(norm.is_finite() && norm > RANK_TOLERANCE * input_norm && norm > 0.0) {
            return Err(FpcaError::RankDeficient {
                column: k,
                residual: norm,
            });
        }
        r[(k, k)] = norm;
        for (dst, vi) in phi.column_mut(k).iter_mut().zip(&v) {
            *dst = vi / norm;
        }
    }
    Ok(OrthoFrame { phi, r })
}

/// Directional derivative of the MGS map at `u` in direction `du`.
///
/// Differentiates `w_k = u_k - sum_{v<k} <u_k, phi_v>_w phi_v` and the
/// normalization `phi_k = w_k / ||w_k||_w`, whose derivative is
/// `(I / ||w_k|| - w_k w_k^T W / ||w_k||^3) dw_k`.
pub fn mgs_jacobian_apply(
    u: &DMatrix<f64>,
    frame: &OrthoFrame,
    du: &DMatrix<f64>,
    grid: &QuadratureGrid,
) -> Result<DMatrix<f64>> {
    let w = grid.weights();
    let (m, p) = u.shape();
    if frame.phi.shape() != (m, p) || du.shape() != (m, p) || w.len() != m {
        return Err(FpcaError::Mgs(format!(
            "shape mismatch: U {:?}, frame {:?}, dU {:?}, grid {}",
            u.shape(),
            frame.phi.shape(),
            du.shape(),
            w.len()
        )));
    }
    let phi = &frame.phi;
    let mut dphi = DMatrix::<f64>::zeros(m, p);
    let mut dw = vec![0.0; m];
    for k in 0..p {
        let uk = u.column(k);
        let duk = du.column(k);
        dw.copy_from_slice(duk.as_slice());
        for j in 0..k {
            let pj = phi.column(j);
            let dpj = dphi.column(j);
            let coef = frame.r[(j, k)];
            let dcoef = wdot(duk.as_slice(), pj.as_slice(), w) + wdot(uk.as_slice(), dpj.as_slice(), w);
            for i in 0..m {
                dw[i] -= dcoef * pj[i] + coef * dpj[i];
            }
        }
        let norm = frame.r[(k, k)];
        let pk = phi.column(k);
        let radial = wdot(pk.as_slice(), &dw, w);
        for i in 0..m {
            dphi[(i, k)] = (dw[i] - radial * pk[i]) / norm;
        }
    }
    Ok(dphi)
}

/// Pulls a cotangent `g = dL/dPhi` back to `dL/dU`.
///
/// This is the adjoint of [`mgs_jacobian_apply`]:
/// `<g, J dU> = <mgs_vjp(g), dU>` in the plain Frobenius pairing. With
/// `S = Phi^T g`, the result is
/// `(g + W Phi (-triu(S) - tril_{-1}(S^T))) R^{-T}`.
pub fn mgs_vjp(frame: &OrthoFrame, g: &DMatrix<f64>, grid: &QuadratureGrid) -> Result<DMatrix<f64>> {
    let w = grid.weights();
    let phi = &frame.phi;
    let (m, p) = phi.shape();
    if g.shape() != (m, p) {
        return Err(FpcaError::Mgs(format!(
            "cotangent shape {:?} does not match frame {:?}",
            g.shape(),
            phi.shape()
        )));
    }
    let s = phi.transpose() * g;
    let mut c = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            c[(i, j)] = if i <= j { -s[(i, j)] } else { -s[(j, i)] };
        }
    }
    let mut wphi = phi.clone();
    for (i, mut row) in wphi.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let x = g + wphi * c;
    // X R^{-T}: solve R Y = X^T, result is Y^T.
    let y = frame
        .r
        .solve_upper_triangular(&x.transpose())
        .ok_or_else(|| FpcaError::Mgs("singular triangular factor".into()))?;
    Ok(y.transpose())
}

/// `max |Phi(C R) - Phi(C)|` for a triangular gauge `R`.
pub fn mgs_gauge_check(
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    basis: &BasisSystem,
    grid: &QuadratureGrid,
) -> Result<f64> {
    let a = mgs_orthonormalize(&(basis.matrix() * c), grid)?;
    let b = mgs_orthonormalize(&(basis.matrix() * (c * r)), grid)?;
    Ok((a.phi - b.phi).amax())
}

/// Flips each column so that its entry of largest magnitude is positive.
pub fn sign_normalize(phi: &mut DMatrix<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(phi.ncols());
    for mut col in phi.column_iter_mut() {
        let imax = col.iamax();
        let s = if col[imax] < 0.0 { -1.0 } else { 1.0 };
        col *= s;
        signs.push(s);
    }
    signs
}
