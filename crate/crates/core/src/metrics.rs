//! Accuracy metrics against a known truth on the reference grid, and
//! median/IQR summaries over replicates.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::SparseDataset;
use crate::error::{FpcaError, Result};
use crate::infer::FittedModel;
use crate::simulate::TruthBundle;

/// Root mean squared difference, minimized over the sign of `est`.
pub fn rmse_phi(est: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(est.len(), truth.len())?;
    let n = est.len() as f64;
    let (mut minus, mut plus) = (0.0, 0.0);
    for (e, t) in est.iter().zip(truth) {
        minus += (e - t).powi(2);
        plus += (e + t).powi(2);
    }
    Ok((minus.min(plus) / n).sqrt())
}

/// Squared error.
pub fn se(est: f64, truth: f64) -> f64 {
    (est - truth).powi(2)
}

/// Root mean squared difference of two covariance surfaces.
pub fn rmse_cov(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(FpcaError::Metrics(format!(
            "covariance shapes differ: {:?} vs {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let n = est.len() as f64;
    Ok(((est - truth).norm_squared() / n).sqrt())
}

/// `sqrt( sum_i sum_j (Xhat_ij - X_ij)^2 / G )` with `G` grid points per
/// subject: squared errors are summed over subjects but divided only by
/// the grid size.
pub fn rmse_x(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    let (sum, g, _) = squared_errors(pred, truth)?;
    Ok((sum / g as f64).sqrt())
}

/// Root of the squared error averaged over subjects and grid points.
pub fn rmse_x_per_subject(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    let (sum, g, n) = squared_errors(pred, truth)?;
    Ok((sum / (g * n) as f64).sqrt())
}

fn squared_errors(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<(f64, usize, usize)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(FpcaError::Metrics(format!(
            "{} predicted subjects but {} true curves",
            pred.len(),
            truth.len()
        )));
    }
    let g = truth[0].len();
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != g || t.len() != g {
            return Err(FpcaError::Metrics("curves have different grid sizes".into()));
        }
        sum += p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((sum, g, pred.len()))
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(FpcaError::Metrics(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// All metrics of one fitted model. Components absent from either the fit
/// or the truth are `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_phi: Vec<f64>,
    pub se_lambda: Vec<f64>,
    pub rmse_sigma_field: f64,
    pub se_sigma2: f64,
    pub rmse_x: f64,
    pub rmse_x_per_subject: f64,
}

/// Options for [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    /// Number of leading components reported.
    pub components: usize,
    /// Add the fitted noise variance to the diagonal of the estimated
    /// covariance surface.
    pub include_nugget: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            components: 3,
            include_nugget: false,
        }
    }
}

/// Compares `model` with `truth` on the truth's grid. `latent` holds each
/// subject's true curve on that grid; predictions are computed from `data`.
pub fn evaluate(
    model: &FittedModel,
    truth: &TruthBundle,
    data: &SparseDataset,
    latent: &[Vec<f64>],
    opts: MetricOptions,
) -> Result<MetricsReport> {
    truth.validate()?;
    let grid = &truth.grid;
    let phi = model.eval_matrix(grid)?;
    let mut rmse = Vec::with_capacity(opts.components);
    let mut se_l = Vec::with_capacity(opts.components);
    for k in 0..opts.components {
        if k < model.p() && k < truth.eigenfunctions.len() {
            let est: Vec<f64> = phi.column(k).iter().copied().collect();
            rmse.push(rmse_phi(&est, &truth.eigenfunctions[k])?);
            se_l.push(se(model.lambda()[k], truth.eigenvalues[k]));
        } else {
            rmse.push(f64::NAN);
            se_l.push(f64::NAN);
        }
    }
    let mut cov = model.covariance_at(grid)?;
    if opts.include_nugget {
        for i in 0..grid.len() {
            cov[(i, i)] += model.sigma2();
        }
    }
    let preds = model.predict_with_bands(data, grid, 0.05)?;
    let yhat: Vec<Vec<f64>> = preds.into_iter().map(|p| p.yhat).collect();
    Ok(MetricsReport {
        rmse_phi: rmse,
        se_lambda: se_l,
        rmse_sigma_field: rmse_cov(&cov, &truth.covariance_matrix())?,
        se_sigma2: se(model.sigma2(), truth.sigma2),
        rmse_x: rmse_x(&yhat, latent)?,
        rmse_x_per_subject: rmse_x_per_subject(&yhat, latent)?,
    })
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and interquartile range of the finite entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub iqr: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    Summary {
        median: quantile(&v, 0.5),
        iqr: quantile(&v, 0.75) - quantile(&v, 0.25),
        count: v.len(),
    }
}

/// One replicate of a benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub q: usize,
    pub p: usize,
    pub converged: bool,
    pub seconds: f64,
    /// `None` when the replicate failed.
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

/// Scale applied to each metric when tabulated.
pub fn display_scale(metric: &str) -> f64 {
    if metric.starts_with("rmse_phi") {
        100.0
    } else if metric.starts_with("se_lambda") {
        10.0
    } else if metric == "se_sigma2" {
        100.0
    } else {
        1.0
    }
}

fn metric_columns(components: usize) -> Vec<String> {
    let mut cols: Vec<String> = (1..=components).map(|k| format!("rmse_phi_{k}")).collect();
    cols.extend((1..=components).map(|k| format!("se_lambda_{k}")));
    cols.extend(
        ["rmse_sigma", "se_sigma2", "rmse_x", "rmse_x_per_subject"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols
}

fn metric_values(r: &MetricsReport) -> Vec<f64> {
    let mut v = r.rmse_phi.clone();
    v.extend(&r.se_lambda);
    v.extend([r.rmse_sigma_field, r.se_sigma2, r.rmse_x, r.rmse_x_per_subject]);
    v
}

/// Writes one row per replicate with raw (unscaled) metric values.
pub fn write_replicates<W: Write>(records: &[ReplicateRecord], components: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["replicate", "seed", "Q", "p", "converged", "seconds"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cols = metric_columns(components);
    header.extend(cols.iter().cloned());
    header.push("error".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![
            r.replicate.to_string(),
            r.seed.to_string(),
            r.q.to_string(),
            r.p.to_string(),
            r.converged.to_string(),
            format!("{:.3}", r.seconds),
        ];
        match &r.report {
            Some(rep) => row.extend(metric_values(rep).iter().map(|v| v.to_string())),
            None => row.extend(cols.iter().map(|_| "NaN".to_string())),
        }
        row.push(r.error.clone().unwrap_or_default());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| FpcaError::Metrics(e.to_string()))
}

/// Per-metric medians and IQRs over replicates, with the display scale.
pub fn summary_table(records: &[ReplicateRecord], components: usize) -> Vec<(String, f64, Summary)> {
    let cols = metric_columns(components);
    let rows: Vec<Vec<f64>> = records
        .iter()
        .filter_map(|r| r.report.as_ref())
        .map(metric_values)
        .collect();
    cols.iter()
        .enumerate()
        .map(|(j, name)| {
            let scale = display_scale(name);
            let vals: Vec<f64> = rows.iter().map(|r| r[j] * scale).collect();
            (name.clone(), scale, summarize(&vals))
        })
        .collect()
}

/// Writes `metric,scale,median,iqr,count` plus convergence rate and mean
/// wall time.
pub fn write_summary<W: Write>(records: &[ReplicateRecord], components: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "scale", "median", "iqr", "count"]).map_err(csv_err)?;
    for (name, scale, s) in summary_table(records, components) {
        w.write_record([name, scale.to_string(), s.median.to_string(), s.iqr.to_string(), s.count.to_string()])
            .map_err(csv_err)?;
    }
    let n = records.len().max(1) as f64;
    let rate = records.iter().filter(|r| r.converged).count() as f64 / n;
    let secs = records.iter().map(|r| r.seconds).sum::<f64>() / n;
    w.write_record(["convergence_rate", "1", &rate.to_string(), "0", &records.len().to_string()])
        .map_err(csv_err)?;
    w.write_record(["seconds", "1", &secs.to_string(), "0", &records.len().to_string()])
        .map_err(csv_err)?;
    w.flush().map_err(|e| FpcaError::Metrics(e.to_string()))
}

fn csv_err(e: csv::Error) -> FpcaError {
    FpcaError::Metrics(format!("writing CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_phi_cases() {
        let t: Vec<f64> = (0..50).map(|j| (j as f64 / 49.0 * 3.0).sin() + 0.5).collect();
        assert_eq!(rmse_phi(&t, &t).unwrap(), 0.0);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert_eq!(rmse_phi(&neg, &t).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert!((rmse_phi(&shifted, &t).unwrap() - 0.1).abs() < 1e-12);
        let neg_shift: Vec<f64> = shifted.iter().map(|v| -v).collect();
        assert_eq!(rmse_phi(&neg_shift, &t).unwrap(), rmse_phi(&shifted, &t).unwrap());
        assert!(rmse_phi(&t[..3], &t).is_err());
    }

    #[test]
    fn squared_error() {
        assert_eq!(se(1.0, 1.0), 0.0);
        assert!((se(1.1, 1.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn covariance_rmse() {
        let a = DMatrix::from_fn(50, 50, |i, j| ((i + j) as f64).cos());
        assert_eq!(rmse_cov(&a, &a).unwrap(), 0.0);
        let b = a.add_scalar(0.1);
        assert!((rmse_cov(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        assert!(rmse_cov(&a, &DMatrix::zeros(49, 50)).is_err());
    }

    #[test]
    fn curve_rmse() {
        let truth = vec![vec![1.0; 50]];
        assert_eq!(rmse_x(&truth, &truth).unwrap(), 0.0);
        let pred = vec![vec![1.2; 50]];
        assert!((rmse_x(&pred, &truth).unwrap() - 0.2).abs() < 1e-12);
        let two_t = vec![vec![0.0; 50]; 4];
        let two_p = vec![vec![0.5; 50]; 4];
        assert!((rmse_x(&two_p, &two_t).unwrap() - 1.0).abs() < 1e-12);
        assert!((rmse_x_per_subject(&two_p, &two_t).unwrap() - 0.5).abs() < 1e-12);
        assert!(rmse_x(&two_p, &truth).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        let s = summarize(&[4.0, f64::NAN, 1.0, 3.0, 2.0]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.iqr, 1.5);
        assert_eq!(s.count, 4);
        assert_eq!(summarize(&[7.0]).median, 7.0);
    }

    #[test]
    fn one_replicate_summary_is_that_replicate() {
        let rep = MetricsReport {
            rmse_phi: vec![0.01, 0.02],
            se_lambda: vec![0.001, 0.002],
            rmse_sigma_field: 0.1,
            se_sigma2: 0.003,
            rmse_x: 0.5,
            rmse_x_per_subject: 0.05,
        };
        let rec = ReplicateRecord {
            replicate: 0,
            seed: 1,
            q: 5,
            p: 2,
            converged: true,
            seconds: 1.0,
            report: Some(rep),
            error: None,
        };
        let table = summary_table(std::slice::from_ref(&rec), 2);
        assert_eq!(table[0].0, "rmse_phi_1");
        assert!((table[0].2.median - 1.0).abs() < 1e-12);
        assert_eq!(table[0].2.iqr, 0.0);
        let mut buf = Vec::new();
        write_summary(&[rec], 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("convergence_rate,1,1,0,1"));
    }
}
