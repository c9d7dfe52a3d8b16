//! Reduced-rank Gaussian likelihood and its analytic gradient.
//!
//! Subject `i` has covariance `Sigma_i = F_i Lambda F_i^T + sigma^2 I`
//! where `F_i` holds the eigenfunctions at the subject's times. The average
//! negative log-likelihood (without the `2 pi` constant)
//!
//! ```text
//! L = (1/n) sum_i [ r_i^T Sigma_i^{-1} r_i + log |Sigma_i| ]
//! ```
//!
//! is evaluated through the `p x p` inner matrix
//! `K_i = sigma^2 Lambda^{-1} + F_i^T F_i`:
//! `Sigma_i^{-1} = (I - F_i K_i^{-1} F_i^T) / sigma^2` and
//! `log |Sigma_i| = (m_i - p) log sigma^2 + log |K_i| + sum_k log lambda_k`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{weighted_cross, BasisSystem, QuadratureGrid};
use crate::dataset::SparseDataset;
use crate::error::{FpcaError, Result};
use crate::linalg::{chol_log_det, stabilized_cholesky};
use crate::mgs::{mgs_orthonormalize, mgs_vjp, OrthoFrame};

/// Relative jitter added to the inner matrix when it is near singular.
pub const INNER_JITTER: f64 = 1e-10;

/// Optimization variables: coefficients `C` (Q x p), log-eigenvalues and
/// the log noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub c: DMatrix<f64>,
    pub eta: Vec<f64>,
    pub gamma: f64,
}

impl ParamVector {
    pub fn new(c: DMatrix<f64>, eta: Vec<f64>, gamma: f64) -> Result<Self> {
        if c.ncols() != eta.len() {
            return Err(FpcaError::Numerical(format!(
                "C has {} columns but {} log-eigenvalues were given",
                c.ncols(),
                eta.len()
            )));
        }
        Ok(Self { c, eta, gamma })
    }

    pub fn q(&self) -> usize {
        self.c.nrows()
    }

    pub fn p(&self) -> usize {
        self.c.ncols()
    }

    /// Length of the flattened vector, `Qp + p + 1`.
    pub fn len(&self) -> usize {
        self.q() * self.p() + self.p() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.eta.iter().map(|e| e.exp()).collect()
    }

    pub fn sigma2(&self) -> f64 {
        self.gamma.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|v| v.is_finite())
            && self.eta.iter().all(|v| v.is_finite())
            && self.gamma.is_finite()
    }

    /// Column-major `C`, then `eta`, then `gamma`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(self.c.as_slice());
        out.extend_from_slice(&self.eta);
        out.push(self.gamma);
        out
    }

    pub fn from_flat(q: usize, p: usize, x: &[f64]) -> Result<Self> {
        if x.len() != q * p + p + 1 {
            return Err(FpcaError::Numerical(format!(
                "flat parameter vector has length {}, expected {}",
                x.len(),
                q * p + p + 1
            )));
        }
        Ok(Self {
            c: DMatrix::from_column_slice(q, p, &x[..q * p]),
            eta: x[q * p..q * p + p].to_vec(),
            gamma: x[q * p + p],
        })
    }
}

/// How eigenfunction values at a subject's times are obtained from the
/// grid values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectEval {
    /// Continuous representation `B(t)^T G^{-1} B^T W Phi`.
    #[default]
    Continuous,
    /// Linear interpolation between neighbouring grid points. Cheaper, with
    /// an `O(h^2)` interpolation error.
    LinearInterp,
}

#[derive(Debug, Clone)]
enum SubjectRows {
    Basis(DMatrix<f64>),
    Interp(Vec<(usize, f64)>),
}

/// Per-subject design: the map from grid eigenfunctions to the subject's
/// times, plus the centered observations.
#[derive(Debug, Clone)]
pub struct SubjectDesign {
    rows: SubjectRows,
    residual: DVector<f64>,
}

impl SubjectDesign {
    pub fn m(&self) -> usize {
        self.residual.len()
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }
}

/// Value and gradient blocks of one subject's term
/// `r^T Sigma^{-1} r + log |Sigma|`.
#[derive(Debug, Clone)]
pub struct SubjectTerm {
    pub value: f64,
    /// `dL_i / dF_i`, `m x p`.
    pub d_f: Option<DMatrix<f64>>,
    /// `dL_i / d lambda_k`.
    pub d_lambda: Option<Vec<f64>>,
    /// `dL_i / d sigma^2`.
    pub d_sigma2: Option<f64>,
}

/// One subject's term evaluated with the Woodbury identity and the
/// determinant lemma.
pub fn subject_term(
    f: &DMatrix<f64>,
    r: &DVector<f64>,
    lambda: &[f64],
    sigma2: f64,
    with_grad: bool,
) -> Result<SubjectTerm> {
    let (m, p) = f.shape();
    let ftf = f.transpose() * f;
    let mut inner = ftf.clone();
    for k in 0..p {
        inner[(k, k)] += sigma2 / lambda[k];
    }
    let chol = stabilized_cholesky(inner, INNER_JITTER * sigma2)?;
    let ftr = f.transpose() * r;
    let z = chol.solve(&ftr);
    let alpha = (r - f * &z) / sigma2;
    let quad = r.dot(&alpha);
    let log_det = (m as f64 - p as f64) * sigma2.ln()
        + chol_log_det(&chol)
        + lambda.iter().map(|l| l.ln()).sum::<f64>();
    let value = quad + log_det;
    if !value.is_finite() {
        return Err(FpcaError::Numerical("subject log-likelihood is not finite".into()));
    }
    if !with_grad {
        return Ok(SubjectTerm {
            value,
            d_f: None,
            d_lambda: None,
            d_sigma2: None,
        });
    }
    // Sigma^{-1} F and tr(Sigma^{-1}).
    let kinv_ftf = chol.solve(&ftf);
    let sinv_f = (f - f * &kinv_ftf) / sigma2;
    let trace_sinv = (m as f64 - kinv_ftf.trace()) / sigma2;
    let fta = f.transpose() * &alpha;
    // (Sigma^{-1} - alpha alpha^T) F
    let k_f = &sinv_f - &alpha * fta.transpose();
    let ftkf = f.transpose() * &k_f;
    let mut d_f = k_f;
    for k in 0..p {
        let s = 2.0 * lambda[k];
        d_f.column_mut(k).scale_mut(s);
    }
    let d_lambda = (0..p).map(|k| ftkf[(k, k)]).collect();
    let d_sigma2 = trace_sinv - alpha.dot(&alpha);
    Ok(SubjectTerm {
        value,
        d_f: Some(d_f),
        d_lambda: Some(d_lambda),
        d_sigma2: Some(d_sigma2),
    })
}

/// Same term through a dense `m x m` Cholesky factorization of `Sigma_i`.
pub fn subject_term_dense(
    f: &DMatrix<f64>,
    r: &DVector<f64>,
    lambda: &[f64],
    sigma2: f64,
) -> Result<f64> {
    let m = f.nrows();
    let lam = DMatrix::from_diagonal(&DVector::from_column_slice(lambda));
    let mut sigma = f * lam * f.transpose();
    for i in 0..m {
        sigma[(i, i)] += sigma2;
    }
    let chol = nalgebra::Cholesky::new(sigma)
        .ok_or_else(|| FpcaError::Numerical("dense covariance is not positive definite".into()))?;
    let quad = r.dot(&chol.solve(r));
    Ok(quad + chol_log_det(&chol))
}

/// Evaluation context for the average negative log-likelihood of one
/// centered dataset under one basis.
#[derive(Debug, Clone)]
pub struct LikelihoodProblem {
    grid: QuadratureGrid,
    basis: BasisSystem,
    /// `G^{-1} B^T W`, `Q x M`.
    projector: DMatrix<f64>,
    subjects: Vec<SubjectDesign>,
    parallel: bool,
}

/// Everything produced by one likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Option<ParamVector>,
    pub frame: OrthoFrame,
}

impl LikelihoodProblem {
    pub fn new(
        data: &SparseDataset,
        basis: &BasisSystem,
        grid: &QuadratureGrid,
        eval: SubjectEval,
    ) -> Result<Self> {
        if basis.matrix().nrows() != grid.len() {
            return Err(FpcaError::Numerical(format!(
                "basis evaluated on {} points but the grid has {}",
                basis.matrix().nrows(),
                grid.len()
            )));
        }
        let projector = continuous_projector(basis, grid);
        let m = grid.len();
        let subjects = data
            .subjects()
            .iter()
            .map(|s| {
                if s.is_empty() {
                    return Err(FpcaError::Numerical(format!(
                        "subject {} has no observations",
                        s.id
                    )));
                }
                let rows = match eval {
                    SubjectEval::Continuous => SubjectRows::Basis(basis.functions().eval_matrix(&s.times)),
                    SubjectEval::LinearInterp => SubjectRows::Interp(
                        s.times
                            .iter()
                            .map(|&t| {
                                let pts = grid.points();
                                let j = pts.partition_point(|&x| x <= t).saturating_sub(1).min(m - 2);
                                (j, (t - pts[j]) / (pts[j + 1] - pts[j]))
                            })
                            .collect(),
                    ),
                };
                Ok(SubjectDesign {
                    rows,
                    residual: DVector::from_column_slice(&s.values),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: grid.clone(),
            basis: basis.clone(),
            projector,
            subjects,
            parallel: false,
        })
    }

    /// Evaluates subjects on the rayon pool. Per-subject results are
    /// reduced in subject order, so values do not depend on scheduling.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(SubjectDesign::m).sum()
    }

    pub fn basis(&self) -> &BasisSystem {
        &self.basis
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn frame(&self, params: &ParamVector) -> Result<OrthoFrame> {
        if params.q() != self.basis.q() {
            return Err(FpcaError::Numerical(format!(
                "parameters have Q = {} but the basis has {}",
                params.q(),
                self.basis.q()
            )));
        }
        mgs_orthonormalize(&(self.basis.matrix() * &params.c), &self.grid)
    }

    /// Eigenfunction values at each subject's times, given grid values.
    fn subject_values(&self, coef: &DMatrix<f64>, phi: &DMatrix<f64>, s: &SubjectDesign) -> DMatrix<f64> {
        match &s.rows {
            SubjectRows::Basis(b) => b * coef,
            SubjectRows::Interp(ix) => {
                let p = phi.ncols();
                DMatrix::from_fn(ix.len(), p, |r, k| {
                    let (j, a) = ix[r];
                    (1.0 - a) * phi[(j, k)] + a * phi[(j + 1, k)]
                })
            }
        }
    }

    fn check(&self, params: &ParamVector) -> Result<(Vec<f64>, f64)> {
        if !params.is_finite() {
            return Err(FpcaError::Numerical("non-finite parameters".into()));
        }
        let lambda = params.lambdas();
        let sigma2 = params.sigma2();
        if lambda.iter().any(|l| !(l.is_finite() && *l > 0.0)) || !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(FpcaError::Numerical(
                "exp(eta) or exp(gamma) overflowed or underflowed".into(),
            ));
        }
        Ok((lambda, sigma2))
    }

    fn terms(&self, params: &ParamVector, frame: &OrthoFrame, with_grad: bool) -> Result<Vec<SubjectTerm>> {
        let (lambda, sigma2) = self.check(params)?;
        let coef = &self.projector * &frame.phi;
        let one = |s: &SubjectDesign| {
            let f = self.subject_values(&coef, &frame.phi, s);
            subject_term(&f, &s.residual, &lambda, sigma2, with_grad)
        };
        if self.parallel {
            self.subjects.par_iter().map(one).collect()
        } else {
            self.subjects.iter().map(one).collect()
        }
    }

    /// Per-subject terms `r_i^T Sigma_i^{-1} r_i + log |Sigma_i|`.
    pub fn subject_terms(&self, params: &ParamVector) -> Result<Vec<f64>> {
        let frame = self.frame(params)?;
        Ok(self.terms(params, &frame, false)?.into_iter().map(|t| t.value).collect())
    }

    /// Average negative log-likelihood.
    pub fn nll(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.evaluate(params, false)?.value)
    }

    /// Average negative log-likelihood and its gradient in `(C, eta, gamma)`.
    pub fn nll_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let e = self.evaluate(params, true)?;
        Ok((e.value, e.gradient.expect("gradient requested")))
    }

    pub fn evaluate(&self, params: &ParamVector, with_grad: bool) -> Result<Evaluation> {
        let frame = self.frame(params)?;
        let terms = self.terms(params, &frame, with_grad)?;
        let n = self.subjects.len() as f64;
        let value = terms.iter().map(|t| t.value).sum::<f64>() / n;
        if !value.is_finite() {
            return Err(FpcaError::Numerical("negative log-likelihood is not finite".into()));
        }
        if !with_grad {
            return Ok(Evaluation {
                value,
                gradient: None,
                frame,
            });
        }
        let (q, p) = (params.q(), params.p());
        let lambda = params.lambdas();
        let sigma2 = params.sigma2();
        let mut d_lambda = vec![0.0; p];
        let mut d_sigma2 = 0.0;
        let mut d_coef = DMatrix::<f64>::zeros(q, p);
        let mut d_phi = DMatrix::<f64>::zeros(self.grid.len(), p);
        for (s, t) in self.subjects.iter().zip(&terms) {
            let df = t.d_f.as_ref().expect("gradient requested");
            for (acc, v) in d_lambda.iter_mut().zip(t.d_lambda.as_ref().expect("gradient requested")) {
                *acc += v;
            }
            d_sigma2 += t.d_sigma2.expect("gradient requested");
            match &s.rows {
                SubjectRows::Basis(b) => d_coef += b.transpose() * df,
                SubjectRows::Interp(ix) => {
                    for (r, &(j, a)) in ix.iter().enumerate() {
                        for k in 0..p {
                            d_phi[(j, k)] += (1.0 - a) * df[(r, k)];
                            d_phi[(j + 1, k)] += a * df[(r, k)];
                        }
                    }
                }
            }
        }
        d_phi += self.projector.transpose() * d_coef;
        d_phi /= n;
        let d_u = mgs_vjp(&frame, &d_phi, &self.grid)?;
        let d_c = self.basis.matrix().transpose() * d_u;
        let d_eta = (0..p).map(|k| lambda[k] * d_lambda[k] / n).collect();
        let d_gamma = sigma2 * d_sigma2 / n;
        Ok(Evaluation {
            value,
            gradient: Some(ParamVector {
                c: d_c,
                eta: d_eta,
                gamma: d_gamma,
            }),
            frame,
        })
    }

    /// Average negative log-likelihood through dense `m_i x m_i`
    /// factorizations. Used to cross-check the structured path.
    pub fn nll_dense(&self, params: &ParamVector) -> Result<f64> {
        let (lambda, sigma2) = self.check(params)?;
        let frame = self.frame(params)?;
        let coef = &self.projector * &frame.phi;
        let mut total = 0.0;
        for s in &self.subjects {
            let f = self.subject_values(&coef, &frame.phi, s);
            total += subject_term_dense(&f, &s.residual, &lambda, sigma2)?;
        }
        Ok(total / self.subjects.len() as f64)
    }

    /// Eigenfunction values at subject `i`'s times.
    pub fn subject_eigenfunctions(&self, params: &ParamVector, i: usize) -> Result<DMatrix<f64>> {
        let frame = self.frame(params)?;
        let coef = &self.projector * &frame.phi;
        let s = self
            .subjects
            .get(i)
            .ok_or_else(|| FpcaError::Numerical(format!("subject index {i} out of range")))?;
        Ok(self.subject_values(&coef, &frame.phi, s))
    }

    pub fn subjects(&self) -> &[SubjectDesign] {
        &self.subjects
    }
}

/// `G^{-1} B^T W`: maps grid values to coefficients of the continuous
/// representation in the raw basis.
pub fn continuous_projector(basis: &BasisSystem, grid: &QuadratureGrid) -> DMatrix<f64> {
    let s = basis.gram_inv_sqrt();
    let ginv = s * s;
    let mut bw = basis.matrix().clone();
    for (j, mut row) in bw.row_iter_mut().enumerate() {
        row *= grid.weights()[j];
    }
    ginv * bw.transpose()
}

/// `Sigma = Phi Lambda Phi^T + sigma^2 I` on the quadrature grid.
pub fn covariance_on_grid(params: &ParamVector, basis: &BasisSystem, grid: &QuadratureGrid) -> Result<DMatrix<f64>> {
    let frame = mgs_orthonormalize(&(basis.matrix() * &params.c), grid)?;
    let lam = DMatrix::from_diagonal(&DVector::from_vec(params.lambdas()));
    let mut sigma = &frame.phi * lam * frame.phi.transpose();
    let s2 = params.sigma2();
    for i in 0..sigma.nrows() {
        sigma[(i, i)] += s2;
    }
    Ok(sigma)
}

/// Average negative log-likelihood of a centered dataset.
pub fn nll(params: &ParamVector, data: &SparseDataset, basis: &BasisSystem, grid: &QuadratureGrid) -> Result<f64> {
    LikelihoodProblem::new(data, basis, grid, SubjectEval::Continuous)?.nll(params)
}

/// Average negative log-likelihood and its gradient.
pub fn nll_grad(
    params: &ParamVector,
    data: &SparseDataset,
    basis: &BasisSystem,
    grid: &QuadratureGrid,
) -> Result<(f64, ParamVector)> {
    LikelihoodProblem::new(data, basis, grid, SubjectEval::Continuous)?.nll_grad(params)
}

/// `Phi^T W Phi`, for orthonormality checks.
pub fn weighted_gram(phi: &DMatrix<f64>, grid: &QuadratureGrid) -> DMatrix<f64> {
    weighted_cross(phi, phi, grid.weights())
}
