//! Fitted-model products: continuous eigenfunctions, conditional-expectation
//! scores, reconstructed trajectories and pointwise confidence bands.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{weighted_cross, BasisKind, BasisSystem, QuadratureGrid};
use crate::dataset::{MeanFunction, SparseDataset};
use crate::error::{FpcaError, Result};
use crate::linalg::{stabilized_cholesky, symmetrize};
use crate::mgs::{mgs_orthonormalize, sign_normalize};
use crate::model::INNER_JITTER;
use crate::optim::{FitResult, StopReason};

/// Quadratic forms of the posterior covariance below this are an error.
const NEGATIVE_VARIANCE_TOL: f64 = -1e-8;

/// Optimizer summary carried with a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub nll: f64,
    pub reason: StopReason,
    pub iterations: usize,
    pub line_search_failures: usize,
    pub grad_inf: f64,
    pub seed: u64,
}

impl FitDiagnostics {
    pub fn converged(&self) -> bool {
        self.reason.is_converged()
    }
}

impl From<&FitResult> for FitDiagnostics {
    fn from(f: &FitResult) -> Self {
        Self {
            nll: f.nll,
            reason: f.reason,
            iterations: f.iterations,
            line_search_failures: f.line_search_failures,
            grad_inf: f.grad_inf,
            seed: f.seed,
        }
    }
}

/// Eigenfunctions on the grid with their continuous representation,
/// eigenvalues in descending order, noise variance and mean.
#[derive(Debug, Clone)]
pub struct FittedModel {
    basis: BasisSystem,
    grid: QuadratureGrid,
    phi: DMatrix<f64>,
    lambda: Vec<f64>,
    sigma2: f64,
    ctilde: DMatrix<f64>,
    mean: MeanFunction,
    domain: (f64, f64),
    diagnostics: FitDiagnostics,
}

/// Predicted trajectory of one subject with its pointwise band.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPrediction {
    pub id: String,
    /// Evaluation points on `[0, 1]`.
    pub times: Vec<f64>,
    pub yhat: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Posterior mean and covariance of one subject's scores.
#[derive(Debug, Clone)]
pub struct ScorePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sorts eigenpairs by decreasing eigenvalue, fixes signs, and computes
/// `C~ = G^{-1/2} B^T W Phi`.
pub fn build_model(
    fit: &FitResult,
    basis: &BasisSystem,
    grid: &QuadratureGrid,
    mean: MeanFunction,
    domain: (f64, f64),
    force: bool,
) -> Result<FittedModel> {
    if !fit.converged() && !force {
        return Err(FpcaError::Infer(format!(
            "fit did not converge ({}); pass force to build anyway",
            fit.reason.as_str()
        )));
    }
    let frame = mgs_orthonormalize(&(basis.matrix() * &fit.params.c), grid)?;
    let lambda = fit.params.lambdas();
    let sigma2 = fit.params.sigma2();
    let mut order: Vec<usize> = (0..lambda.len()).collect();
    order.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]));
    let mut phi = frame.phi.select_columns(&order);
    sign_normalize(&mut phi);
    let lambda = order.iter().map(|&k| lambda[k]).collect();
    let ctilde = basis.gram_inv_sqrt() * weighted_cross(basis.matrix(), &phi, grid.weights());
    FittedModel::new(
        basis.clone(),
        grid.clone(),
        ctilde,
        lambda,
        sigma2,
        mean,
        domain,
        FitDiagnostics::from(fit),
    )
}

impl FittedModel {
    /// Assembles a model from its continuous representation. Grid values
    /// are recomputed as `B G^{-1/2} C~`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        basis: BasisSystem,
        grid: QuadratureGrid,
        ctilde: DMatrix<f64>,
        lambda: Vec<f64>,
        sigma2: f64,
        mean: MeanFunction,
        domain: (f64, f64),
        diagnostics: FitDiagnostics,
    ) -> Result<Self> {
        if ctilde.nrows() != basis.q() || ctilde.ncols() != lambda.len() || lambda.is_empty() {
            return Err(FpcaError::Infer(format!(
                "coefficient matrix is {}x{} but Q = {} and p = {}",
                ctilde.nrows(),
                ctilde.ncols(),
                basis.q(),
                lambda.len()
            )));
        }
        if lambda.iter().any(|l| !(l.is_finite() && *l > 0.0)) || !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(FpcaError::Infer("eigenvalues and noise variance must be positive".into()));
        }
        if lambda.windows(2).any(|w| w[1] > w[0]) {
            return Err(FpcaError::Infer("eigenvalues must be in descending order".into()));
        }
        if !(domain.0.is_finite() && domain.1.is_finite() && domain.1 > domain.0) {
            return Err(FpcaError::Infer("invalid domain bounds".into()));
        }
        let phi = basis.matrix() * (basis.gram_inv_sqrt() * &ctilde);
        Ok(Self {
            basis,
            grid,
            phi,
            lambda,
            sigma2,
            ctilde,
            mean,
            domain,
            diagnostics,
        })
    }

    pub fn basis(&self) -> &BasisSystem {
        &self.basis
    }

    pub fn basis_kind(&self) -> BasisKind {
        self.basis.kind()
    }

    pub fn q(&self) -> usize {
        self.basis.q()
    }

    pub fn p(&self) -> usize {
        self.lambda.len()
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    /// `M x p` eigenfunction values on the grid.
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn ctilde(&self) -> &DMatrix<f64> {
        &self.ctilde
    }

    pub fn mean(&self) -> &MeanFunction {
        &self.mean
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    /// Eigenfunctions at a point of `[0, 1]`.
    pub fn eval_eigenfunctions(&self, t: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(FpcaError::Infer(format!("evaluation point {t} is outside [0, 1]")));
        }
        let b = self.basis.eval_at(t)?;
        Ok((self.basis.gram_inv_sqrt() * &self.ctilde).tr_mul(&b))
    }

    /// Eigenfunctions at several points, one row per point.
    pub fn eval_matrix(&self, ts: &[f64]) -> Result<DMatrix<f64>> {
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(FpcaError::Infer(format!("evaluation point {t} is outside [0, 1]")));
        }
        Ok(self.basis.functions().eval_matrix(ts) * (self.basis.gram_inv_sqrt() * &self.ctilde))
    }

    /// Smooth covariance `Phi Lambda Phi^T` at the given points, without
    /// the noise term.
    pub fn covariance_at(&self, ts: &[f64]) -> Result<DMatrix<f64>> {
        let f = self.eval_matrix(ts)?;
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.lambda));
        Ok(&f * lam * f.transpose())
    }

    /// Posterior of the scores given observations at `times` (may be empty).
    pub fn score_posterior(&self, times: &[f64], values: &[f64]) -> Result<ScorePosterior> {
        if times.len() != values.len() {
            return Err(FpcaError::Infer("times and values differ in length".into()));
        }
        let f = self.eval_matrix(times)?;
        let r = DVector::from_iterator(values.len(), times.iter().zip(values).map(|(t, y)| y - self.mean.eval(*t)));
        posterior(&f, &r, &self.lambda, self.sigma2)
    }

    /// Conditional-expectation scores for every subject.
    pub fn scores(&self, data: &SparseDataset) -> Result<Vec<DVector<f64>>> {
        data.subjects()
            .par_iter()
            .map(|s| {
                if s.is_empty() {
                    return Err(FpcaError::Infer(format!("subject {} has no observations", s.id)));
                }
                Ok(self.score_posterior(&s.times, &s.values)?.mean)
            })
            .collect()
    }

    /// Reconstructed trajectories at `eval_points` with `1 - alpha`
    /// pointwise bands.
    pub fn predict_with_bands(
        &self,
        data: &SparseDataset,
        eval_points: &[f64],
        alpha: f64,
    ) -> Result<Vec<SubjectPrediction>> {
        let z = normal_quantile(alpha)?;
        let f = self.eval_matrix(eval_points)?;
        let mu: Vec<f64> = eval_points.iter().map(|&t| self.mean.eval(t)).collect();
        data.subjects()
            .par_iter()
            .map(|s| {
                if s.is_empty() {
                    return Err(FpcaError::Infer(format!("subject {} has no observations", s.id)));
                }
                let post = self.score_posterior(&s.times, &s.values)?;
                band(&s.id, eval_points, &f, &mu, &post, z)
            })
            .collect()
    }
}

/// Band for one subject given its score posterior.
pub fn band(
    id: &str,
    eval_points: &[f64],
    f: &DMatrix<f64>,
    mu: &[f64],
    post: &ScorePosterior,
    z: f64,
) -> Result<SubjectPrediction> {
    let n = eval_points.len();
    let mut yhat = Vec::with_capacity(n);
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for j in 0..n {
        let row = f.row(j).transpose();
        let center = mu[j] + row.dot(&post.mean);
        let var = (&post.cov * &row).dot(&row);
        if var < NEGATIVE_VARIANCE_TOL {
            return Err(FpcaError::Infer(format!(
                "subject {id}: negative predictive variance {var:.3e} at t = {}",
                eval_points[j]
            )));
        }
        let half = z * var.max(0.0).sqrt();
        yhat.push(center);
        lower.push(center - half);
        upper.push(center + half);
    }
    Ok(SubjectPrediction {
        id: id.to_string(),
        times: eval_points.to_vec(),
        yhat,
        lower,
        upper,
        scores: post.mean.iter().copied().collect(),
    })
}

/// Score posterior given eigenfunction values `f` at the observed times.
///
/// `Lambda F^T Sigma^{-1} r` and `Lambda - Lambda F^T Sigma^{-1} F Lambda`
/// are evaluated in the equivalent forms `K^{-1} F^T r` and
/// `sigma^2 K^{-1}` with `K = sigma^2 Lambda^{-1} + F^T F`, which stay
/// accurate as `sigma^2 -> 0`.
pub fn posterior(f: &DMatrix<f64>, r: &DVector<f64>, lambda: &[f64], sigma2: f64) -> Result<ScorePosterior> {
    let p = lambda.len();
    let mut inner = f.transpose() * f;
    for k in 0..p {
        inner[(k, k)] += sigma2 / lambda[k];
    }
    let chol = stabilized_cholesky(inner, INNER_JITTER * sigma2)?;
    let mean = chol.solve(&(f.transpose() * r));
    let cov = chol.inverse() * sigma2;
    Ok(ScorePosterior {
        mean,
        cov: symmetrize(cov),
    })
}

/// Two-sided standard normal quantile `z_{1 - alpha/2}`.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FpcaError::Infer(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = Normal::new(0.0, 1.0).map_err(|e| FpcaError::Infer(e.to_string()))?;
    Ok(n.inverse_cdf(1.0 - alpha / 2.0))
}

/// Writes `id,t,yhat,lo,hi` with times mapped back to original units.
pub fn write_predictions<W: Write>(preds: &[SubjectPrediction], domain: (f64, f64), writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let width = domain.1 - domain.0;
    w.write_record(["id", "t", "yhat", "lo", "hi"]).map_err(csv_err)?;
    for s in preds {
        for j in 0..s.times.len() {
            w.write_record([
                s.id.clone(),
                (domain.0 + width * s.times[j]).to_string(),
                s.yhat[j].to_string(),
                s.lower[j].to_string(),
                s.upper[j].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| FpcaError::Infer(e.to_string()))
}

/// Writes `id,xi_1..xi_p`.
pub fn write_scores<W: Write>(ids: &[String], scores: &[DVector<f64>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = scores.first().map_or(0, |s| s.len());
    let mut header = vec!["id".to_string()];
    header.extend((1..=p).map(|k| format!("xi_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, xi) in ids.iter().zip(scores) {
        let mut rec = vec![id.clone()];
        rec.extend(xi.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| FpcaError::Infer(e.to_string()))
}

/// Writes grid eigenfunction values as `t,phi_1..phi_p` in original units.
pub fn write_eigenfunctions<W: Write>(model: &FittedModel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let (lo, hi) = model.domain();
    let mut header = vec!["t".to_string()];
    header.extend((1..=model.p()).map(|k| format!("phi_{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (j, t) in model.grid().points().iter().enumerate() {
        let mut rec = vec![(lo + (hi - lo) * t).to_string()];
        rec.extend(model.phi().row(j).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| FpcaError::Infer(e.to_string()))
}

fn csv_err(e: csv::Error) -> FpcaError {
    FpcaError::Infer(format!("writing CSV: {e}"))
}
