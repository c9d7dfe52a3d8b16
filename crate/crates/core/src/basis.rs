//! Quadrature grids and basis systems (clamped B-splines, Fourier).
//!
//! A [`BasisSystem`] stores the basis evaluated on the model grid together
//! with its Gram matrix `G = \int B B^T` and the symmetric inverse square
//! root `G^{-1/2}` used for the continuous eigenfunction representation.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};
use crate::linalg::sym_inv_sqrt;

/// Default number of quadrature points on `[0, 1]`.
pub const DEFAULT_GRID_SIZE: usize = 101;

const GRAM_EIGEN_FLOOR: f64 = 1e-12;

/// Uniform grid on `[0, 1]` with trapezoidal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Arbitrary nodes and weights; nodes must be increasing in `[0, 1]`.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.len() < 3 {
            return Err(FpcaError::Basis(
                "grid needs at least 3 points and one weight per point".into(),
            ));
        }
        if points.windows(2).any(|w| w[1] <= w[0])
            || points[0] < 0.0
            || points[points.len() - 1] > 1.0
            || weights.iter().any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(FpcaError::Basis(
                "grid points must increase within [0, 1] and weights be positive".into(),
            ));
        }
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `sum_j w_j f(tau_j)`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Uniform `m`-point grid on `[0, 1]` with trapezoidal weights.
pub fn make_grid(m: usize) -> Result<QuadratureGrid> {
    if m < 3 {
        return Err(FpcaError::Basis(format!("grid needs at least 3 points, got {m}")));
    }
    let h = 1.0 / (m - 1) as f64;
    let points = (0..m)
        .map(|j| if j == m - 1 { 1.0 } else { j as f64 * h })
        .collect();
    let mut weights = vec![h; m];
    weights[0] = h / 2.0;
    weights[m - 1] = h / 2.0;
    Ok(QuadratureGrid { points, weights })
}

/// Which family a basis belongs to, as selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisKind {
    Bspline { degree: usize },
    Fourier,
}

impl Default for BasisKind {
    fn default() -> Self {
        BasisKind::Bspline { degree: 3 }
    }
}

impl BasisKind {
    pub fn build(&self, q: usize, grid: &QuadratureGrid) -> Result<BasisSystem> {
        match *self {
            BasisKind::Bspline { degree } => bspline_basis(q, degree, grid),
            BasisKind::Fourier => fourier_basis(q, grid),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BasisKind::Bspline { .. } => "bspline",
            BasisKind::Fourier => "fourier",
        }
    }
}

/// Pointwise definition of a basis family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisFunctions {
    Bspline { degree: usize, knots: Vec<f64> },
    Fourier { q: usize },
}

impl BasisFunctions {
    pub fn len(&self) -> usize {
        match self {
            BasisFunctions::Bspline { degree, knots } => knots.len() - degree - 1,
            BasisFunctions::Fourier { q } => *q,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> BasisKind {
        match self {
            BasisFunctions::Bspline { degree, .. } => BasisKind::Bspline { degree: *degree },
            BasisFunctions::Fourier { .. } => BasisKind::Fourier,
        }
    }

    /// Writes all basis values at `t` into `out` (length Q). No range check.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            BasisFunctions::Bspline { degree, knots } => bspline_eval_into(knots, *degree, t, out),
            BasisFunctions::Fourier { .. } => fourier_eval_into(t, out),
        }
    }

    /// Basis values at each of `ts` as a `len(ts) x Q` matrix.
    pub fn eval_matrix(&self, ts: &[f64]) -> DMatrix<f64> {
        let q = self.len();
        let mut row = vec![0.0; q];
        let mut out = DMatrix::zeros(ts.len(), q);
        for (i, &t) in ts.iter().enumerate() {
            self.eval_into(t, &mut row);
            for (j, v) in row.iter().enumerate() {
                out[(i, j)] = *v;
            }
        }
        out
    }
}

/// A basis evaluated on a quadrature grid plus its Gram geometry.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    functions: BasisFunctions,
    matrix: DMatrix<f64>,
    gram: DMatrix<f64>,
    gram_inv_sqrt: DMatrix<f64>,
}

impl BasisSystem {
    fn assemble(functions: BasisFunctions, grid: &QuadratureGrid) -> Result<Self> {
        let matrix = functions.eval_matrix(grid.points());
        for j in 0..matrix.ncols() {
            if matrix.column(j).iter().all(|v| *v == 0.0) {
                return Err(FpcaError::Basis(format!(
                    "basis function {j} vanishes on every grid point; use a finer grid"
                )));
            }
        }
        // Same quadrature as the model, so grid functions in the span of the
        // basis are reproduced exactly by their continuous representation.
        let gram = weighted_cross(&matrix, &matrix, grid.weights());
        let gram_inv_sqrt = sym_inv_sqrt(&gram, GRAM_EIGEN_FLOOR)?;
        Ok(Self {
            functions,
            matrix,
            gram,
            gram_inv_sqrt,
        })
    }

    pub fn functions(&self) -> &BasisFunctions {
        &self.functions
    }

    pub fn kind(&self) -> BasisKind {
        self.functions.kind()
    }

    /// Number of basis functions Q.
    pub fn q(&self) -> usize {
        self.matrix.ncols()
    }

    /// `M x Q` evaluations on the grid.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.gram_inv_sqrt
    }

    /// Exact basis values at `t` in `[0, 1]`.
    pub fn eval_at(&self, t: f64) -> Result<DVector<f64>> {
        eval_basis_at(self, t)
    }
}

/// `A^T diag(w) B`.
pub fn weighted_cross(a: &DMatrix<f64>, b: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut wb = b.clone();
    for (i, mut row) in wb.row_iter_mut().enumerate() {
        row *= w[i];
    }
    a.transpose() * wb
}

/// Clamped uniform B-spline basis of `q` functions of the given degree.
pub fn bspline_basis(q: usize, degree: usize, grid: &QuadratureGrid) -> Result<BasisSystem> {
    if q < degree + 1 {
        return Err(FpcaError::Basis(format!(
            "a degree-{degree} B-spline basis needs at least {} functions, got {q}",
            degree + 1
        )));
    }
    BasisSystem::assemble(
        BasisFunctions::Bspline {
            degree,
            knots: clamped_knots(q, degree),
        },
        grid,
    )
}

/// Fourier basis `1, sqrt2 sin(2 pi t), sqrt2 cos(2 pi t), sqrt2 sin(4 pi t), ...`.
pub fn fourier_basis(q: usize, grid: &QuadratureGrid) -> Result<BasisSystem> {
    if q < 1 {
        return Err(FpcaError::Basis("Fourier basis needs at least 1 function".into()));
    }
    BasisSystem::assemble(BasisFunctions::Fourier { q }, grid)
}

/// Evaluates every basis function at `t`; `t` must lie in `[0, 1]`.
pub fn eval_basis_at(basis: &BasisSystem, t: f64) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FpcaError::Basis(format!("evaluation point {t} outside [0, 1]")));
    }
    let mut out = vec![0.0; basis.q()];
    basis.functions.eval_into(t, &mut out);
    Ok(DVector::from_vec(out))
}

/// Open uniform knot vector: `degree + 1` copies of each endpoint and
/// `q - degree - 1` equally spaced interior knots.
pub fn clamped_knots(q: usize, degree: usize) -> Vec<f64> {
    let spans = q - degree;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..spans).map(|j| j as f64 / spans as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    knots
}

fn bspline_eval_into(knots: &[f64], degree: usize, t: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let q = knots.len() - degree - 1;
    // Knot span containing t; the right endpoint belongs to the last span.
    let span = if t >= knots[q] {
        q - 1
    } else {
        let mut s = knots.partition_point(|&k| k <= t) - 1;
        s = s.clamp(degree, q - 1);
        s
    };
    // Cox-de Boor triangle for the degree+1 non-zero functions.
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    for (k, v) in n.iter().enumerate() {
        out[span - degree + k] = *v;
    }
}

fn fourier_eval_into(t: f64, out: &mut [f64]) {
    for (j, v) in out.iter_mut().enumerate() {
        *v = if j == 0 {
            1.0
        } else {
            let k = j.div_ceil(2) as f64;
            let arg = 2.0 * PI * k * t;
            if j % 2 == 1 {
                SQRT_2 * arg.sin()
            } else {
                SQRT_2 * arg.cos()
            }
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    #[test]
    fn three_point_grid() {
        let g = make_grid(3).unwrap();
        assert_eq!(g.points(), &[0.0, 0.5, 1.0]);
        assert_eq!(g.weights(), &[0.25, 0.5, 0.25]);
        assert!(make_grid(2).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        for m in [3, 4, 10, 101, 257] {
            let g = make_grid(m).unwrap();
            assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn trapezoid_is_exact_for_lines_and_close_for_square() {
        let g = make_grid(101).unwrap();
        let lin: Vec<f64> = g.points().iter().map(|t| 3.0 * t - 1.0).collect();
        assert!((g.integrate(&lin) - 0.5).abs() < 1e-14);
        let sq: Vec<f64> = g.points().iter().map(|t| t * t).collect();
        // Error is exactly h^2 / 6 for t^2.
        assert!((g.integrate(&sq) - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn bspline_partition_of_unity() {
        let g = make_grid(101).unwrap();
        for q in [4, 7, 10, 20] {
            let b = bspline_basis(q, 3, &g).unwrap();
            for row in b.matrix().row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bernstein_values_at_half() {
        let g = make_grid(11).unwrap();
        let b = bspline_basis(4, 3, &g).unwrap();
        let v = b.eval_at(0.5).unwrap();
        let expect = [0.125, 0.375, 0.375, 0.125];
        for (a, e) in v.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn clamped_endpoints() {
        let g = make_grid(101).unwrap();
        let b = bspline_basis(10, 3, &g).unwrap();
        let v0 = b.eval_at(0.0).unwrap();
        assert_eq!(v0[0], 1.0);
        assert!(v0.iter().skip(1).all(|v| *v == 0.0));
        let v1 = b.eval_at(1.0).unwrap();
        assert_eq!(v1[9], 1.0);
    }

    #[test]
    fn too_few_functions_for_degree() {
        let g = make_grid(11).unwrap();
        assert!(bspline_basis(3, 3, &g).is_err());
    }

    #[test]
    fn gram_inverse_sqrt_invariant() {
        let g = make_grid(101).unwrap();
        let b = bspline_basis(10, 3, &g).unwrap();
        let s = b.gram_inv_sqrt();
        let id = s * b.gram() * s;
        assert!(max_abs(&(id - DMatrix::identity(10, 10))) < 1e-10);
        assert!(max_abs(&(b.gram() - b.gram().transpose())) < 1e-14);
        let eig = nalgebra::SymmetricEigen::new(b.gram().clone());
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        assert!(lo > 0.0 && (hi / lo).is_finite());
    }

    #[test]
    fn fourier_norms_and_orthogonality() {
        let g = make_grid(101).unwrap();
        let b = fourier_basis(3, &g).unwrap();
        let ip = weighted_cross(b.matrix(), b.matrix(), g.weights());
        assert!((ip[(1, 1)] - 1.0).abs() < 1e-3);
        assert!(ip[(1, 2)].abs() < 1e-3);
        let one = fourier_basis(1, &g).unwrap();
        assert!((one.gram()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(one.matrix().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn fourier_at_quarter() {
        let g = make_grid(11).unwrap();
        let b = fourier_basis(3, &g).unwrap();
        let v = b.eval_at(0.25).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] - SQRT_2).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn pointwise_matches_grid_rows() {
        let g = make_grid(37).unwrap();
        for b in [bspline_basis(8, 3, &g).unwrap(), fourier_basis(7, &g).unwrap()] {
            for (j, &t) in g.points().iter().enumerate() {
                let v = b.eval_at(t).unwrap();
                for k in 0..b.q() {
                    assert!((v[k] - b.matrix()[(j, k)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_range_evaluation() {
        let g = make_grid(11).unwrap();
        let b = fourier_basis(3, &g).unwrap();
        assert!(b.eval_at(1.5).is_err());
        assert!(b.eval_at(-0.01).is_err());
    }
}
