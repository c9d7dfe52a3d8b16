//! Choice of `(Q, p)` by AIC over a grid, by the sequential Q-then-p
//! strategy, or by K-fold cross-validated likelihood.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{make_grid, BasisKind, BasisSystem, QuadratureGrid, DEFAULT_GRID_SIZE};
use crate::dataset::{center, estimate_mean, MeanFunction, SparseDataset, DEFAULT_MEAN_BINS};
use crate::error::{FpcaError, Result};
use crate::model::LikelihoodProblem;
use crate::optim::{fit, FitResult, OptimConfig};

/// `Q p^2 + p + 1`.
pub fn aic_penalty(q: usize, p: usize) -> usize {
    q * p * p + p + 1
}

/// `n * nll + Q p^2 + p + 1`.
pub fn aic(nll: f64, n: usize, q: usize, p: usize) -> f64 {
    n as f64 * nll + aic_penalty(q, p) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Grid,
    Sequential,
    Cv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub basis: BasisKind,
    pub grid_size: usize,
    pub q_range: Vec<usize>,
    pub p_range: Vec<usize>,
    pub strategy: Strategy,
    pub folds: usize,
    pub fold_seed: u64,
    pub mean_bins: usize,
    /// Estimate the mean on each training fold instead of once on all data.
    pub refit_mean_per_fold: bool,
    pub optim: OptimConfig,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            basis: BasisKind::default(),
            grid_size: DEFAULT_GRID_SIZE,
            q_range: (5..=11).collect(),
            p_range: (2..=6).collect(),
            strategy: Strategy::Grid,
            folds: 5,
            fold_seed: 0,
            mean_bins: DEFAULT_MEAN_BINS,
            refit_mean_per_fold: false,
            optim: OptimConfig::default(),
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_range.is_empty() || self.p_range.is_empty() {
            return Err(FpcaError::Select("Q and p ranges must be non-empty".into()));
        }
        if self.p_range.contains(&0) || self.q_range.contains(&0) {
            return Err(FpcaError::Select("Q and p must be positive".into()));
        }
        self.optim.validate()
    }
}

/// One fitted `(Q, p)` pair.
#[derive(Debug, Clone)]
pub struct CandidateReport {
    pub q: usize,
    pub p: usize,
    pub fit: Option<FitResult>,
    pub aic: f64,
    pub cv: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl CandidateReport {
    pub fn converged(&self) -> bool {
        self.fit.as_ref().is_some_and(FitResult::converged) && self.error.is_none()
    }

    pub fn nll(&self) -> f64 {
        self.fit.as_ref().map_or(f64::NAN, |f| f.nll)
    }

    fn score(&self, strategy: Strategy) -> f64 {
        match strategy {
            Strategy::Cv => self.cv.unwrap_or(f64::NAN),
            _ => self.aic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub chosen: (usize, usize),
    pub candidates: Vec<CandidateReport>,
    pub strategy: Strategy,
    /// Mean estimated on all subjects.
    pub mean: MeanFunction,
}

impl SelectionResult {
    pub fn chosen_report(&self) -> &CandidateReport {
        self.candidates
            .iter()
            .find(|c| (c.q, c.p) == self.chosen && c.converged())
            .expect("chosen candidate is among the converged reports")
    }
}

/// Minimizer of the criterion among converged candidates; ties go to the
/// smaller `p`, then the smaller `Q`.
fn argmin(cands: &[CandidateReport], strategy: Strategy) -> Result<(usize, usize)> {
    cands
        .iter()
        .filter(|c| c.converged() && c.score(strategy).is_finite())
        .min_by(|a, b| {
            a.score(strategy)
                .total_cmp(&b.score(strategy))
                .then(a.p.cmp(&b.p))
                .then(a.q.cmp(&b.q))
        })
        .map(|c| (c.q, c.p))
        .ok_or_else(|| FpcaError::Select("no candidate converged".into()))
}

struct Context {
    grid: QuadratureGrid,
    centered: SparseDataset,
    mean: MeanFunction,
}

fn prepare(data: &SparseDataset, config: &SelectConfig) -> Result<Context> {
    config.validate()?;
    let grid = make_grid(config.grid_size)?;
    let mean = estimate_mean(data, config.mean_bins)?;
    let centered = center(data, &mean);
    Ok(Context { grid, centered, mean })
}

fn build_basis(kind: BasisKind, q: usize, grid: &QuadratureGrid) -> Result<BasisSystem> {
    kind.build(q, grid)
}

fn fit_candidate(ctx: &Context, config: &SelectConfig, q: usize, p: usize) -> CandidateReport {
    let start = Instant::now();
    let n = ctx.centered.n_subjects();
    let result = build_basis(config.basis, q, &ctx.grid).and_then(|b| fit(&ctx.centered, &b, &ctx.grid, q, p, &config.optim));
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(f) => {
            if !f.converged() {
                log::warn!("candidate Q={q} p={p} did not converge ({})", f.reason.as_str());
            }
            CandidateReport {
                q,
                p,
                aic: aic(f.nll, n, q, p),
                fit: Some(f),
                cv: None,
                seconds,
                error: None,
            }
        }
        Err(e) => {
            log::warn!("candidate Q={q} p={p} failed: {e}");
            CandidateReport {
                q,
                p,
                fit: None,
                aic: f64::NAN,
                cv: None,
                seconds,
                error: Some(e.to_string()),
            }
        }
    }
}

fn fit_all(ctx: &Context, config: &SelectConfig, pairs: &[(usize, usize)]) -> Vec<CandidateReport> {
    pairs
        .par_iter()
        .map(|&(q, p)| fit_candidate(ctx, config, q, p))
        .collect()
}

fn valid_pairs(config: &SelectConfig) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for &q in &config.q_range {
        for &p in &config.p_range {
            if q >= p {
                pairs.push((q, p));
            }
        }
    }
    pairs
}

/// Fits every `(Q, p)` with `Q >= p` and picks the smallest AIC.
pub fn grid_select(data: &SparseDataset, config: &SelectConfig) -> Result<SelectionResult> {
    let ctx = prepare(data, config)?;
    let pairs = valid_pairs(config);
    if pairs.is_empty() {
        return Err(FpcaError::Select("no (Q, p) pair satisfies Q >= p".into()));
    }
    let candidates = fit_all(&ctx, config, &pairs);
    Ok(SelectionResult {
        chosen: argmin(&candidates, Strategy::Grid)?,
        candidates,
        strategy: Strategy::Grid,
        mean: ctx.mean,
    })
}

/// Chooses `Q` at the largest `p`, then `p` at that `Q`.
pub fn sequential_select(data: &SparseDataset, config: &SelectConfig) -> Result<SelectionResult> {
    let p_max = *config.p_range.iter().max().ok_or_else(|| FpcaError::Select("empty p range".into()))?;
    let q_min = *config.q_range.iter().min().ok_or_else(|| FpcaError::Select("empty Q range".into()))?;
    if p_max > q_min {
        return Err(FpcaError::Select(format!(
            "sequential selection needs max(p) <= min(Q), got {p_max} > {q_min}"
        )));
    }
    let ctx = prepare(data, config)?;
    let phase1: Vec<(usize, usize)> = config.q_range.iter().map(|&q| (q, p_max)).collect();
    let mut candidates = fit_all(&ctx, config, &phase1);
    let (q_star, _) = argmin(&candidates, Strategy::Sequential)
        .map_err(|_| FpcaError::Select("no candidate converged in the Q phase".into()))?;
    let phase2: Vec<CandidateReport> = config
        .p_range
        .par_iter()
        .map(|&p| {
            if p == p_max {
                candidates
                    .iter()
                    .find(|c| c.q == q_star && c.p == p_max)
                    .cloned()
                    .expect("phase one fitted (Q*, max p)")
            } else {
                fit_candidate(&ctx, config, q_star, p)
            }
        })
        .collect();
    let chosen = argmin(&phase2, Strategy::Sequential)
        .map_err(|_| FpcaError::Select("no candidate converged in the p phase".into()))?;
    candidates.extend(phase2);
    Ok(SelectionResult {
        chosen,
        candidates,
        strategy: Strategy::Sequential,
        mean: ctx.mean,
    })
}

/// Fold index of each subject: a seeded shuffle dealt round-robin into `k`
/// groups. Depends only on `(n, k, seed)`.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

fn cv_score(data: &SparseDataset, ctx: &Context, config: &SelectConfig, folds: &[usize], q: usize, p: usize) -> Result<f64> {
    let basis = build_basis(config.basis, q, &ctx.grid)?;
    let terms = (0..config.folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != k).collect();
            let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == k).collect();
            let (train_c, test_c) = if config.refit_mean_per_fold {
                let raw_train = data.subset(&train)?;
                let m = estimate_mean(&raw_train, config.mean_bins)?;
                (center(&raw_train, &m), center(&data.subset(&test)?, &m))
            } else {
                (ctx.centered.subset(&train)?, ctx.centered.subset(&test)?)
            };
            let f = fit(&train_c, &basis, &ctx.grid, q, p, &config.optim)?;
            if !f.converged() {
                return Err(FpcaError::Select(format!(
                    "fold {k} fit for Q={q} p={p} did not converge ({})",
                    f.reason.as_str()
                )));
            }
            let held = LikelihoodProblem::new(&test_c, &basis, &ctx.grid, config.optim.subject_eval)?;
            Ok(held.subject_terms(&f.params)?.iter().sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum())
}

/// K-fold cross-validation over subjects. Each candidate is also fitted on
/// all subjects so the winner comes with a full-data fit.
pub fn cv_select(data: &SparseDataset, config: &SelectConfig) -> Result<SelectionResult> {
    let k = config.folds;
    let n = data.n_subjects();
    if k < 2 || n < k {
        return Err(FpcaError::Select(format!("need 2 <= K <= n, got K = {k}, n = {n}")));
    }
    let ctx = prepare(data, config)?;
    let folds = assign_folds(n, k, config.fold_seed);
    let pairs = valid_pairs(config);
    if pairs.is_empty() {
        return Err(FpcaError::Select("no (Q, p) pair satisfies Q >= p".into()));
    }
    let candidates: Vec<CandidateReport> = pairs
        .par_iter()
        .map(|&(q, p)| {
            let start = Instant::now();
            let mut rep = fit_candidate(&ctx, config, q, p);
            match cv_score(data, &ctx, config, &folds, q, p) {
                Ok(s) => rep.cv = Some(s),
                Err(e) => {
                    log::warn!("cross-validation for Q={q} p={p} failed: {e}");
                    rep.error = Some(e.to_string());
                }
            }
            rep.seconds = start.elapsed().as_secs_f64();
            rep
        })
        .collect();
    Ok(SelectionResult {
        chosen: argmin(&candidates, Strategy::Cv)?,
        candidates,
        strategy: Strategy::Cv,
        mean: ctx.mean,
    })
}

/// Dispatches on `config.strategy`.
pub fn select(data: &SparseDataset, config: &SelectConfig) -> Result<SelectionResult> {
    match config.strategy {
        Strategy::Grid => grid_select(data, config),
        Strategy::Sequential => sequential_select(data, config),
        Strategy::Cv => cv_select(data, config),
    }
}

/// Writes `Q,p,nll,aic,cv,converged,seconds`.
pub fn write_selection<W: Write>(candidates: &[CandidateReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| FpcaError::Select(format!("writing selection table: {e}"));
    w.write_record(["Q", "p", "nll", "aic", "cv", "converged", "seconds"]).map_err(err)?;
    for c in candidates {
        w.write_record([
            c.q.to_string(),
            c.p.to_string(),
            c.nll().to_string(),
            c.aic.to_string(),
            c.cv.map_or_else(String::new, |v| v.to_string()),
            c.converged().to_string(),
            format!("{:.3}", c.seconds),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| FpcaError::Select(e.to_string()))
}
