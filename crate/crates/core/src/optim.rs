//! BFGS with a strong-Wolfe cubic line search, plus the fitting driver.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, QuadratureGrid};
use crate::dataset::SparseDataset;
use crate::error::{FpcaError, Result};
use crate::model::{LikelihoodProblem, ParamVector, SubjectEval};

/// Curvature pairs with `s^T y <= SKIP_RATIO * |s| |y|` are not used.
const SKIP_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub grad_inf_tol: f64,
    pub nll_abs_tol: f64,
    /// Consecutive iterations with an nll change below `nll_abs_tol`
    /// required before stopping on that criterion.
    pub nll_change_patience: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_steps: usize,
    pub seed: u64,
    pub n_restarts: usize,
    pub record_trace: bool,
    pub subject_eval: SubjectEval,
    /// Evaluate the per-subject sum on the rayon pool.
    pub parallel_subjects: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_inf_tol: 1e-6,
            nll_abs_tol: 1e-5,
            nll_change_patience: 10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 40,
            seed: 0,
            n_restarts: 1,
            record_trace: true,
            subject_eval: SubjectEval::Continuous,
            parallel_subjects: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let (c1, c2) = (self.wolfe_c1, self.wolfe_c2);
        if !(0.0 < c1 && c1 < c2 && c2 < 1.0) {
            return Err(FpcaError::Config(format!(
                "Wolfe constants must satisfy 0 < c1 < c2 < 1, got c1 = {c1}, c2 = {c2}"
            )));
        }
        if !(self.grad_inf_tol > 0.0 && self.nll_abs_tol > 0.0) {
            return Err(FpcaError::Config("optimizer tolerances must be positive".into()));
        }
        if self.max_line_search_steps == 0 || self.n_restarts == 0 || self.nll_change_patience == 0 {
            return Err(FpcaError::Config(
                "max_line_search_steps, n_restarts and nll_change_patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Gradient,
    NllChange,
    MaxIters,
    LineSearchFailure,
}

impl StopReason {
    pub fn is_converged(self) -> bool {
        matches!(self, StopReason::Gradient | StopReason::NllChange)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Gradient => "gradient",
            StopReason::NllChange => "nll-change",
            StopReason::MaxIters => "max-iters",
            StopReason::LineSearchFailure => "line-search-failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub nll: f64,
    pub grad_inf: f64,
}

/// Outcome of [`bfgs_minimize`].
#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub reason: StopReason,
    pub iterations: usize,
    pub line_search_failures: usize,
    pub evaluations: usize,
    pub trace: Vec<TracePoint>,
}

impl MinimizeResult {
    pub fn converged(&self) -> bool {
        self.reason.is_converged()
    }
}

/// A fitted parameter vector with optimizer diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamVector,
    pub nll: f64,
    pub reason: StopReason,
    pub iterations: usize,
    pub line_search_failures: usize,
    pub grad_inf: f64,
    /// Seed of the initialization that produced this result.
    pub seed: u64,
    pub trace: Vec<TracePoint>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.reason.is_converged()
    }
}

/// Initial point: uniform `[-1, 1]` coefficients, log-eigenvalues spread
/// linearly from 100 down to 1, and `sigma^2 = 0.01`.
pub fn init_params(q: usize, p: usize, seed: u64) -> Result<ParamVector> {
    if p == 0 || q < p {
        return Err(FpcaError::Optim(format!("need Q >= p >= 1, got Q = {q}, p = {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = DMatrix::zeros(q, p);
    // Column-major fill so the draw order matches the flattening order.
    for v in c.iter_mut() {
        *v = rng.random_range(-1.0..=1.0);
    }
    let eta = if p == 1 {
        vec![100f64.ln()]
    } else {
        (0..p)
            .map(|k| (100.0 - 99.0 * k as f64 / (p - 1) as f64).ln())
            .collect()
    };
    Ok(ParamVector {
        c,
        eta,
        gamma: 0.01f64.ln(),
    })
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Probe {
    alpha: f64,
    value: f64,
    slope: f64,
    grad: DVector<f64>,
}

enum Search {
    Found(Probe),
    Failed,
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`,
/// safeguarded to the interior of the interval.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let width = hi - lo;
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let trial = if disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
    } else {
        f64::NAN
    };
    if trial.is_finite() {
        trial.clamp(lo + 0.1 * width, hi - 0.1 * width)
    } else {
        0.5 * (lo + hi)
    }
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a DVector<f64>,
    d: &'a DVector<f64>,
    f0: f64,
    g0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evaluations: usize,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    /// Evaluates the objective along the ray; failures and non-finite
    /// values are reported as `+inf`.
    fn eval(&mut self, alpha: f64) -> Probe {
        self.evaluations += 1;
        let xt = self.x + self.d * alpha;
        match (self.f)(xt.as_slice()) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => {
                let grad = DVector::from_vec(g);
                let slope = grad.dot(self.d);
                Probe {
                    alpha,
                    value: v,
                    slope,
                    grad,
                }
            }
            _ => Probe {
                alpha,
                value: f64::INFINITY,
                slope: f64::NAN,
                grad: DVector::zeros(0),
            },
        }
    }

    fn armijo(&self, p: &Probe) -> bool {
        p.value.is_finite() && p.value <= self.f0 + self.c1 * p.alpha * self.g0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.slope.abs() <= -self.c2 * self.g0
    }

    fn run(&mut self, alpha0: f64) -> Search {
        let mut prev = Probe {
            alpha: 0.0,
            value: self.f0,
            slope: self.g0,
            grad: DVector::zeros(0),
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evaluations < self.budget {
            let cur = self.eval(alpha);
            if !self.armijo(&cur) || (!first && cur.value >= prev.value) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return Search::Found(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev);
            }
            first = false;
            alpha = cur.alpha * 2.0;
            prev = cur;
        }
        Search::Failed
    }

    /// Narrows `[lo, hi]` where `lo` satisfies Armijo with the smallest value
    /// seen so far.
    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Search {
        while self.evaluations < self.budget {
            let alpha = if hi.value.is_finite() && hi.slope.is_finite() {
                cubic_step(lo.alpha, lo.value, lo.slope, hi.alpha, hi.value, hi.slope)
            } else {
                0.5 * (lo.alpha + hi.alpha)
            };
            if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
            let cur = self.eval(alpha);
            if !self.armijo(&cur) || cur.value >= lo.value {
                hi = cur;
                continue;
            }
            if self.curvature(&cur) {
                return Search::Found(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        // Fall back to the best Armijo point if the budget ran out.
        if lo.alpha > 0.0 && self.armijo(&lo) {
            Search::Found(lo)
        } else {
            Search::Failed
        }
    }
}

/// Minimizes `f` from `x0` with BFGS on the inverse Hessian.
///
/// `f` returns the value and gradient. Errors and non-finite values at trial
/// points are treated as `+inf`; at `x0` they are returned as errors.
pub fn bfgs_minimize<F>(mut f: F, x0: &[f64], config: &OptimConfig) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let n = x0.len();
    let (mut value, g) = f(x0)?;
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) || g.len() != n {
        return Err(FpcaError::Optim("objective is not finite at the starting point".into()));
    }
    let mut x = DVector::from_column_slice(x0);
    let mut grad = DVector::from_vec(g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh_h = true;
    let mut quiet = 0usize;
    let mut reset_since_step = false;
    let mut evaluations = 1;
    let mut failures = 0;
    let mut trace = Vec::new();
    let record = |iter: usize, v: f64, g: &DVector<f64>, trace: &mut Vec<TracePoint>| {
        if config.record_trace {
            trace.push(TracePoint {
                iter,
                nll: v,
                grad_inf: inf_norm(g),
            });
        }
    };
    record(0, value, &grad, &mut trace);

    let mut iter = 0;
    let reason = loop {
        if inf_norm(&grad) < config.grad_inf_tol {
            break StopReason::Gradient;
        }
        if iter >= config.max_iters {
            break StopReason::MaxIters;
        }
        let mut d = -(&h * &grad);
        let mut slope = grad.dot(&d);
        if !(slope < 0.0) {
            h.fill_with_identity();
            fresh_h = true;
            d = -grad.clone();
            slope = grad.dot(&d);
        }
        let alpha0 = if fresh_h { (1.0 / grad.norm()).min(1.0) } else { 1.0 };
        let mut ls = LineSearch {
            f: &mut f,
            x: &x,
            d: &d,
            f0: value,
            g0: slope,
            c1: config.wolfe_c1,
            c2: config.wolfe_c2,
            budget: config.max_line_search_steps,
            evaluations: 0,
        };
        let outcome = ls.run(alpha0);
        evaluations += ls.evaluations;
        let probe = match outcome {
            Search::Found(p) => p,
            Search::Failed => {
                failures += 1;
                if reset_since_step {
                    break StopReason::LineSearchFailure;
                }
                h.fill_with_identity();
                fresh_h = true;
                reset_since_step = true;
                continue;
            }
        };
        iter += 1;
        reset_since_step = false;
        let s = &d * probe.alpha;
        let y = &probe.grad - &grad;
        let sy = s.dot(&y);
        if sy > SKIP_RATIO * s.norm() * y.norm() {
            if fresh_h {
                h.fill_with_identity();
                h *= sy / y.dot(&y);
                fresh_h = false;
            }
            let hy = &h * &y;
            let rho = 1.0 / sy;
            let coef = (sy + y.dot(&hy)) * rho * rho;
            for j in 0..n {
                for i in 0..n {
                    h[(i, j)] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let change = (value - probe.value).abs();
        x += &s;
        value = probe.value;
        grad = probe.grad;
        record(iter, value, &grad, &mut trace);
        if inf_norm(&grad) < config.grad_inf_tol {
            break StopReason::Gradient;
        }
        quiet = if change < config.nll_abs_tol { quiet + 1 } else { 0 };
        if quiet >= config.nll_change_patience {
            break StopReason::NllChange;
        }
    };
    Ok(MinimizeResult {
        x: x.as_slice().to_vec(),
        value,
        grad: grad.as_slice().to_vec(),
        reason,
        iterations: iter,
        line_search_failures: failures,
        evaluations,
        trace,
    })
}

/// Minimizes the average negative log-likelihood of centered data over
/// `(C, eta, gamma)` for fixed `(Q, p)`.
pub fn fit(
    data: &SparseDataset,
    basis: &BasisSystem,
    grid: &QuadratureGrid,
    q: usize,
    p: usize,
    config: &OptimConfig,
) -> Result<FitResult> {
    let problem = LikelihoodProblem::new(data, basis, grid, config.subject_eval)?
        .with_parallel(config.parallel_subjects);
    fit_problem(&problem, q, p, config)
}

/// As [`fit`], on a prepared likelihood.
pub fn fit_problem(problem: &LikelihoodProblem, q: usize, p: usize, config: &OptimConfig) -> Result<FitResult> {
    config.validate()?;
    if q != problem.basis().q() {
        return Err(FpcaError::Optim(format!(
            "requested Q = {q} but the basis has {} functions",
            problem.basis().q()
        )));
    }
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for r in 0..config.n_restarts {
        let seed = config.seed.wrapping_add(r as u64);
        let x0 = init_params(q, p, seed)?.to_flat();
        let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let params = ParamVector::from_flat(q, p, x)?;
            let (v, g) = problem.nll_grad(&params)?;
            Ok((v, g.to_flat()))
        };
        let res = match bfgs_minimize(objective, &x0, config) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("fit Q={q} p={p} seed={seed}: {e}");
                last_err = Some(e);
                continue;
            }
        };
        let cand = FitResult {
            params: ParamVector::from_flat(q, p, &res.x)?,
            nll: res.value,
            reason: res.reason,
            iterations: res.iterations,
            line_search_failures: res.line_search_failures,
            grad_inf: res.grad.iter().fold(0.0, |m, g| m.max(g.abs())),
            seed,
            trace: res.trace,
        };
        let better = match &best {
            None => true,
            Some(b) => (cand.converged(), -cand.nll) > (b.converged(), -b.nll),
        };
        if better {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| FpcaError::Optim(format!("no restart produced a finite objective for Q={q}, p={p}")))
    })
}

/// Writes a trace as `iter,nll,grad_inf`.
pub fn write_trace<W: Write>(trace: &[TracePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "nll", "grad_inf"]).map_err(csv_err)?;
    for t in trace {
        w.write_record([t.iter.to_string(), t.nll.to_string(), t.grad_inf.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| FpcaError::Optim(e.to_string()))
}

fn csv_err(e: csv::Error) -> FpcaError {
    FpcaError::Optim(format!("writing trace: {e}"))
}
