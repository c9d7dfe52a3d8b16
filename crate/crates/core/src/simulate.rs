//! Ground-truth processes and sparse dataset generation.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{bspline_basis, make_grid, BasisFunctions, QuadratureGrid};
use crate::dataset::{SparseDataset, Subject};
use crate::error::{FpcaError, Result};
use crate::mgs::{mgs_orthonormalize, sign_normalize};

/// Number of equally spaced points of the evaluation grid.
pub const REFERENCE_GRID_SIZE: usize = 50;

/// Diagonal jitter added before the joint Cholesky factorization.
pub const SAMPLING_JITTER: f64 = 1e-10;

const TRUTH_GRID_SIZE: usize = 1001;
const MAX_REDRAWS: usize = 5;

const SPIKED_EIGENVALUES: [f64; 10] = [1.0, 0.66, 0.52, 0.07, 9.47e-3, 1.28e-3, 1.74e-4, 2.35e-5, 3.18e-6, 4.30e-7];

/// `n` equally spaced points on `[0, 1]`, both ends included.
pub fn reference_grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| if j + 1 == n { 1.0 } else { j as f64 / (n - 1) as f64 })
        .collect()
}

/// Trapezoidal weights for [`reference_grid`].
fn trapezoid_weights(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    let mut w = vec![h; n];
    w[0] = h / 2.0;
    w[n - 1] = h / 2.0;
    w
}

/// Modified Bessel function of the second kind, `K_0` and `K_1`.
///
/// Power series for `x <= 2`; Steed's continued fraction (CF2) beyond.
fn bessel_k01(x: f64) -> (f64, f64) {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if x <= 2.0 {
        let y = x * x / 4.0;
        let l = (x / 2.0).ln();
        // K0 = -(ln(x/2) + gamma) I0 + sum_{k>=1} y^k/(k!)^2 H_k
        // K1 = 1/x + ln(x/2) I1 - (x/4) sum_k y^k/(k!(k+1)!) (psi(k+1) + psi(k+2))
        let mut term0 = 1.0; // y^k / (k!)^2
        let mut term1 = 1.0; // y^k / (k! (k+1)!)
        let mut i0 = 1.0;
        let mut i1 = 1.0;
        let mut s0 = 0.0;
        let mut harmonic = 0.0;
        let mut s1 = 2.0 * (-EULER) + 1.0;
        for k in 1..60 {
            let kf = k as f64;
            term0 *= y / (kf * kf);
            term1 *= y / (kf * (kf + 1.0));
            harmonic += 1.0 / kf;
            i0 += term0;
            i1 += term1;
            s0 += term0 * harmonic;
            // psi(k+1) + psi(k+2) = 2 (H_k - gamma) + 1/(k+1)
            s1 += term1 * (2.0 * (harmonic - EULER) + 1.0 / (kf + 1.0));
            if term0 < 1e-18 * i0 && term1 < 1e-18 * i1 {
                break;
            }
        }
        let k0 = -(l + EULER) * i0 + s0;
        let k1 = 1.0 / x + l * (x / 2.0) * i1 - (x / 4.0) * s1;
        (k0, k1)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 1..10_000 {
            let fi = i as f64;
            a -= 2.0 * fi;
            c = -a * c / (fi + 1.0);
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < 1e-17 {
                break;
            }
        }
        h *= a1;
        let k0 = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        let k1 = k0 * (x + 0.5 - h) / x;
        (k0, k1)
    }
}

/// `K_n(x)` for integer order by upward recurrence from `K_0`, `K_1`.
pub fn bessel_k(n: u32, x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(FpcaError::Simulate(format!("Bessel K needs x > 0, got {x}")));
    }
    let (mut km, mut k) = bessel_k01(x);
    if n == 0 {
        return Ok(km);
    }
    for j in 1..n {
        let next = km + 2.0 * j as f64 / x * k;
        km = k;
        k = next;
    }
    Ok(k)
}

/// Supported Matérn smoothness orders.
#[derive(Debug, Clone, Copy, PartialEq)]
enum MaternOrder {
    Integer(u32),
    /// `nu = k + 1/2`
    HalfInteger(u32),
}

impl MaternOrder {
    fn parse(nu: f64) -> Result<Self> {
        let twice = 2.0 * nu;
        if !(nu > 0.0) || twice.fract() != 0.0 || twice > 200.0 {
            return Err(FpcaError::Simulate(format!(
                "Matérn order must be a positive integer or half-integer, got {nu}"
            )));
        }
        let t = twice as u32;
        Ok(if t.is_multiple_of(2) {
            MaternOrder::Integer(t / 2)
        } else {
            MaternOrder::HalfInteger(t / 2)
        })
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Matérn covariance between `s` and `t`.
pub fn matern_cov(s: f64, t: f64, sigma: f64, rho: f64, nu: f64) -> Result<f64> {
    if !(sigma > 0.0 && rho > 0.0) {
        return Err(FpcaError::Simulate(format!(
            "Matérn sigma and rho must be positive, got {sigma}, {rho}"
        )));
    }
    let order = MaternOrder::parse(nu)?;
    Ok(matern_value((s - t).abs(), sigma * sigma, rho, nu, order))
}

fn matern_value(d: f64, var: f64, rho: f64, nu: f64, order: MaternOrder) -> f64 {
    if d == 0.0 {
        return var;
    }
    let x = (2.0 * nu).sqrt() * d / rho;
    match order {
        MaternOrder::HalfInteger(k) => {
            let poly: f64 = (0..=k)
                .map(|i| factorial(k + i) / (factorial(i) * factorial(k - i)) * (2.0 * x).powi((k - i) as i32))
                .sum();
            var * (-x).exp() * factorial(k) / factorial(2 * k) * poly
        }
        MaternOrder::Integer(n) => {
            let kn = bessel_k(n, x).unwrap_or(0.0);
            // 2^{1-nu} / Gamma(nu) x^nu K_nu(x), computed as a product of
            // (x/2)/j factors to avoid overflow for small x
            let mut scale = 2.0 * kn;
            for j in 1..n {
                scale *= x / 2.0 / j as f64;
            }
            var * scale * (x / 2.0)
        }
    }
}

/// Eigenvalue rules for the B-spline random field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenRule {
    /// `lambda_k = k^{-0.6}`, five components.
    Pow,
    /// Three leading, one intermediate and six small eigenvalues.
    Spiked,
}

impl EigenRule {
    pub fn eigenvalues(self) -> Vec<f64> {
        match self {
            EigenRule::Pow => (1..=5).map(|k| (k as f64).powf(-0.6)).collect(),
            EigenRule::Spiked => SPIKED_EIGENVALUES.to_vec(),
        }
    }
}

/// Ground-truth process description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessSpec {
    Matern { sigma: f64, rho: f64, nu: f64 },
    Eggcrate,
    BsplineField { q: usize, rule: EigenRule, seed: u64 },
}

impl ProcessSpec {
    /// The process with its parameters from the simulation study.
    pub fn matern_default() -> Self {
        ProcessSpec::Matern {
            sigma: 1.0,
            rho: 0.1,
            nu: 4.0,
        }
    }

    pub fn truth(&self) -> Result<GroundTruth> {
        match *self {
            ProcessSpec::Matern { sigma, rho, nu } => matern_truth(sigma, rho, nu),
            ProcessSpec::Eggcrate => Ok(eggcrate_truth()),
            ProcessSpec::BsplineField { q, rule, seed } => bspline_field_truth(q, rule, seed),
        }
    }
}

#[derive(Debug, Clone)]
enum TruthKind {
    Matern { var: f64, rho: f64, nu: f64, order: MaternOrder },
    Eggcrate,
    Bspline { functions: BasisFunctions, coef: DMatrix<f64> },
}

/// Mean and covariance of a simulated process, with its eigenpairs where
/// they are known in closed form.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    kind: TruthKind,
    lambda: Vec<f64>,
}

pub fn eggcrate_truth() -> GroundTruth {
    GroundTruth {
        kind: TruthKind::Eggcrate,
        lambda: vec![1.0, 0.5, 0.25],
    }
}

pub fn matern_truth(sigma: f64, rho: f64, nu: f64) -> Result<GroundTruth> {
    matern_cov(0.0, 0.0, sigma, rho, nu)?;
    Ok(GroundTruth {
        kind: TruthKind::Matern {
            var: sigma * sigma,
            rho,
            nu,
            order: MaternOrder::parse(nu)?,
        },
        lambda: Vec::new(),
    })
}

/// Random eigenfunctions in a clamped cubic B-spline space, orthonormal on
/// a fine trapezoidal grid.
pub fn bspline_field_truth(q: usize, rule: EigenRule, seed: u64) -> Result<GroundTruth> {
    let lambda = rule.eigenvalues();
    let p = lambda.len();
    if q < p {
        return Err(FpcaError::Simulate(format!(
            "{p} eigenfunctions do not fit in {q} basis functions"
        )));
    }
    let fine = make_grid(TRUTH_GRID_SIZE)?;
    let basis = bspline_basis(q, 3, &fine)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let c = DMatrix::from_fn(q, p, |_, _| rng.random_range(-1.0..=1.0));
        match mgs_orthonormalize(&(basis.matrix() * &c), &fine) {
            Ok(frame) => {
                let rinv = frame
                    .r
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| FpcaError::Simulate("triangular factor is singular".into()))?;
                let mut coef = c * rinv;
                let mut phi = basis.matrix() * &coef;
                let signs = sign_normalize(&mut phi);
                for (k, s) in signs.iter().enumerate() {
                    coef.column_mut(k).scale_mut(*s);
                }
                return Ok(GroundTruth {
                    kind: TruthKind::Bspline {
                        functions: basis.functions().clone(),
                        coef,
                    },
                    lambda,
                });
            }
            Err(e) => last = Some(e),
        }
    }
    Err(FpcaError::Simulate(format!(
        "could not draw full-rank eigenfunctions in {MAX_REDRAWS} attempts: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

impl GroundTruth {
    pub fn mean(&self, t: f64) -> f64 {
        match self.kind {
            TruthKind::Matern { .. } => 5.0 * (4.0 * t.powi(3) + 6.0 * t * t - 12.0 * t).cos(),
            TruthKind::Eggcrate => 5.0 * (2.0 * PI * t).sin(),
            TruthKind::Bspline { .. } => 0.0,
        }
    }

    /// Known eigenvalues; empty for the Matérn process.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.lambda
    }

    /// Eigenfunction values at `ts`, one row per point. `None` for the
    /// Matérn process.
    pub fn eigenfunctions_at(&self, ts: &[f64]) -> Option<DMatrix<f64>> {
        match &self.kind {
            TruthKind::Matern { .. } => None,
            TruthKind::Eggcrate => Some(DMatrix::from_fn(ts.len(), 3, |i, k| {
                let t = ts[i];
                match k {
                    0 => SQRT_2 * (2.0 * PI * t).sin(),
                    1 => SQRT_2 * (4.0 * PI * t).cos(),
                    _ => SQRT_2 * (4.0 * PI * t).sin(),
                }
            })),
            TruthKind::Bspline { functions, coef } => Some(functions.eval_matrix(ts) * coef),
        }
    }

    pub fn cov(&self, s: f64, t: f64) -> f64 {
        self.cov_matrix(&[s, t])[(0, 1)]
    }

    /// Covariance matrix at `ts`.
    pub fn cov_matrix(&self, ts: &[f64]) -> DMatrix<f64> {
        match &self.kind {
            TruthKind::Matern { var, rho, nu, order } => DMatrix::from_fn(ts.len(), ts.len(), |i, j| {
                matern_value((ts[i] - ts[j]).abs(), *var, *rho, *nu, *order)
            }),
            _ => {
                let f = self.eigenfunctions_at(ts).expect("finite-rank truth");
                let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.lambda));
                &f * lam * f.transpose()
            }
        }
    }

    /// Leading `p` eigenpairs on `ts` with trapezoidal weights: exact for
    /// finite-rank truths, numerical (weighted eigendecomposition of the
    /// discretized kernel) for the Matérn process.
    pub fn reference_eigenpairs(&self, ts: &[f64], p: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if let Some(f) = self.eigenfunctions_at(ts) {
            let p = p.min(self.lambda.len());
            return Ok((self.lambda[..p].to_vec(), f.columns(0, p).into_owned()));
        }
        if ts.len() < 3 || ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FpcaError::Simulate("reference grid must be increasing with 3+ points".into()));
        }
        let w = trapezoid_weights_at(ts);
        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let k = self.cov_matrix(ts);
        let a = DMatrix::from_fn(ts.len(), ts.len(), |i, j| sw[i] * k[(i, j)] * sw[j]);
        let eig = SymmetricEigen::new(a);
        let mut order: Vec<usize> = (0..ts.len()).collect();
        order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
        let p = p.min(ts.len());
        let lambda = order[..p].iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut phi = DMatrix::from_fn(ts.len(), p, |r, c| eig.eigenvectors[(r, order[c])] / sw[r]);
        sign_normalize(&mut phi);
        Ok((lambda, phi))
    }
}

fn trapezoid_weights_at(ts: &[f64]) -> Vec<f64> {
    let n = ts.len();
    let mut w = vec![0.0; n];
    for j in 0..n - 1 {
        let h = ts[j + 1] - ts[j];
        w[j] += h / 2.0;
        w[j + 1] += h / 2.0;
    }
    w
}

/// Sample size, observation-count range and noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub process: ProcessSpec,
    pub n: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub noise_var: f64,
    pub seed: u64,
}

impl SimSpec {
    /// One of the three standard settings: 1 (n=50, m in 5..=15, noise 1),
    /// 2 (n=100, m in 5..=15, noise 1), 3 (n=500, m in 3..=7, noise 0.25).
    pub fn setting(process: ProcessSpec, setting: u8, seed: u64) -> Result<Self> {
        let (n, m_min, m_max, noise_var) = match setting {
            1 => (50, 5, 15, 1.0),
            2 => (100, 5, 15, 1.0),
            3 => (500, 3, 7, 0.25),
            _ => {
                return Err(FpcaError::Simulate(format!(
                    "unknown setting {setting}; expected 1, 2 or 3"
                )))
            }
        };
        Ok(Self {
            process,
            n,
            m_min,
            m_max,
            noise_var,
            seed,
        })
    }

    /// B-spline field design used for selection studies: noise 1/16 with
    /// 2 to 10 observations per subject.
    pub fn bspline_selection(rule: EigenRule, n: usize, seed: u64) -> Self {
        Self {
            process: ProcessSpec::BsplineField { q: 10, rule, seed },
            n,
            m_min: 2,
            m_max: 10,
            noise_var: 1.0 / 16.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m_min == 0 || self.m_min > self.m_max {
            return Err(FpcaError::Simulate(format!(
                "need n >= 1 and 1 <= m_min <= m_max, got n = {}, m in [{}, {}]",
                self.n, self.m_min, self.m_max
            )));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(FpcaError::Simulate("noise variance must be non-negative".into()));
        }
        Ok(())
    }
}

/// A simulated dataset with latent curves at observed times and on the
/// reference grid.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: SparseDataset,
    pub reference_grid: Vec<f64>,
    /// Latent curve values at each subject's observed times.
    pub latent_observed: Vec<Vec<f64>>,
    /// Latent curve values on the reference grid.
    pub latent_reference: Vec<Vec<f64>>,
}

/// Draws a dataset. Subject `i` uses its own stream of the seeded
/// generator, so results do not depend on scheduling.
pub fn simulate_dataset(spec: &SimSpec, truth: &GroundTruth) -> Result<SimulatedData> {
    spec.validate()?;
    let grid = reference_grid(REFERENCE_GRID_SIZE);
    let noise_sd = spec.noise_var.sqrt();
    let draws = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let m = rng.random_range(spec.m_min..=spec.m_max);
            let mut times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let mut pts = times.clone();
            pts.extend_from_slice(&grid);
            let mut k = truth.cov_matrix(&pts);
            for d in 0..pts.len() {
                k[(d, d)] += SAMPLING_JITTER;
            }
            let chol = nalgebra::Cholesky::new(k).ok_or_else(|| {
                FpcaError::Simulate(format!("subject {i}: covariance is not positive definite after jitter"))
            })?;
            let z = DVector::from_fn(pts.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = chol.l() * z;
            let latent: Vec<f64> = pts.iter().zip(x.iter()).map(|(t, v)| truth.mean(*t) + v).collect();
            let obs: Vec<f64> = latent[..m].to_vec();
            let values = obs
                .iter()
                .map(|v| v + noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok((
                Subject {
                    id: format!("{}", i + 1),
                    times,
                    values,
                },
                obs,
                latent[m..].to_vec(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut subjects = Vec::with_capacity(spec.n);
    let mut latent_observed = Vec::with_capacity(spec.n);
    let mut latent_reference = Vec::with_capacity(spec.n);
    for (s, o, r) in draws {
        subjects.push(s);
        latent_observed.push(o);
        latent_reference.push(r);
    }
    Ok(SimulatedData {
        dataset: SparseDataset::new(subjects, 0.0, 1.0)?,
        reference_grid: grid,
        latent_observed,
        latent_reference,
    })
}

/// Truth summary on the reference grid, persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthBundle {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// One vector per component.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Smooth covariance, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub sigma2: f64,
}

impl TruthBundle {
    /// Summarizes `truth` on the reference grid with up to `p` components.
    pub fn new(truth: &GroundTruth, sigma2: f64, p: usize) -> Result<Self> {
        let grid = reference_grid(REFERENCE_GRID_SIZE);
        let (eigenvalues, phi) = truth.reference_eigenpairs(&grid, p)?;
        let cov = truth.cov_matrix(&grid);
        Ok(Self {
            mean: grid.iter().map(|t| truth.mean(*t)).collect(),
            eigenvalues,
            eigenfunctions: phi.column_iter().map(|c| c.iter().copied().collect()).collect(),
            covariance: cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
            sigma2,
            grid,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Self = serde_json::from_str(text)?;
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        let bad = self.mean.len() != n
            || self.eigenfunctions.len() != self.eigenvalues.len()
            || self.eigenfunctions.iter().any(|f| f.len() != n)
            || self.covariance.len() != n
            || self.covariance.iter().any(|r| r.len() != n);
        if bad {
            return Err(FpcaError::Simulate("truth bundle has inconsistent dimensions".into()));
        }
        Ok(())
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        DMatrix::from_fn(n, n, |i, j| self.covariance[i][j])
    }
}

/// A grid with trapezoidal weights matching [`reference_grid`].
pub fn reference_quadrature() -> Result<QuadratureGrid> {
    QuadratureGrid::new(reference_grid(REFERENCE_GRID_SIZE), trapezoid_weights(REFERENCE_GRID_SIZE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::make_grid;

    /// `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt` by the trapezoid
    /// rule, which converges geometrically for this integrand.
    fn bessel_k_integral(nu: f64, x: f64) -> f64 {
        let h: f64 = 1e-3;
        let mut sum = 0.5 * (-x).exp();
        let mut t = h;
        loop {
            let v = (-x * t.cosh()).exp() * (nu * t).cosh();
            sum += v;
            if v < 1e-300 || x * t.cosh() > 745.0 {
                break;
            }
            t += h;
        }
        sum * h
    }

    #[test]
    fn bessel_matches_integral_oracle() {
        for &x in &[0.05, 0.5, 1.0, 1.9, 2.0, 2.1, 5.0, 10.0, 28.28, 60.0] {
            for n in 0..=5 {
                let a = bessel_k(n, x).unwrap();
                let b = bessel_k_integral(n as f64, x);
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "K_{n}({x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn matern_zero_distance_is_variance() {
        assert_eq!(matern_cov(0.3, 0.3, 1.0, 0.1, 4.0).unwrap(), 1.0);
        assert_eq!(matern_cov(0.3, 0.3, 2.0, 0.1, 2.5).unwrap(), 4.0);
    }

    #[test]
    fn matern_half_is_exponential() {
        for &d in &[0.01, 0.1, 0.37, 1.0] {
            assert_eq!(matern_cov(0.0, d, 1.0, 0.1, 0.5).unwrap(), (-d / 0.1f64).exp());
        }
    }

    #[test]
    fn matern_three_halves_closed_form() {
        let d: f64 = 0.07;
        let x = 3f64.sqrt() * d / 0.1;
        let expect = (1.0 + x) * (-x).exp();
        assert!((matern_cov(0.0, d, 1.0, 0.1, 1.5).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn matern_nu4_against_oracle() {
        // 2^{1-nu}/Gamma(nu) x^nu K_nu(x) with nu = 4, Gamma(4) = 6
        let d = 0.1;
        let x = 8f64.sqrt() * d / 0.1;
        let expect = 2f64.powi(-3) / 6.0 * x.powi(4) * bessel_k_integral(4.0, x);
        assert!((matern_cov(0.2, 0.3, 1.0, 0.1, 4.0).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn matern_rejects_other_orders() {
        assert!(matern_cov(0.0, 0.1, 1.0, 0.1, 0.3).is_err());
        assert!(matern_cov(0.0, 0.1, 1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn eggcrate_values() {
        let t = eggcrate_truth();
        assert!((t.cov(0.25, 0.25) - 3.0).abs() < 1e-12);
        let g = make_grid(1001).unwrap();
        let f = t.eigenfunctions_at(g.points()).unwrap();
        let gram = crate::basis::weighted_cross(&f, &f, g.weights());
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-6);
        let c = t.cov_matrix(&[0.1, 0.4, 0.77]);
        assert_eq!(c, c.transpose());
    }

    #[test]
    fn eggcrate_grid_eigenpairs_match_truth() {
        let g = make_grid(201).unwrap();
        let t = eggcrate_truth();
        let k = t.cov_matrix(g.points());
        let sw: Vec<f64> = g.weights().iter().map(|w| w.sqrt()).collect();
        let a = DMatrix::from_fn(201, 201, |i, j| sw[i] * k[(i, j)] * sw[j]);
        let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for (est, tr) in ev.iter().zip([1.0, 0.5, 0.25]) {
            assert!((est - tr).abs() < 1e-3);
        }
    }

    #[test]
    fn eigen_rules() {
        let p = EigenRule::Pow.eigenvalues();
        let expect = [1.0, 0.660, 0.517, 0.435, 0.381];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(EigenRule::Spiked.eigenvalues()[3], 0.07);
    }

    #[test]
    fn bspline_truth_is_orthonormal_on_fine_grid() {
        let t = bspline_field_truth(10, EigenRule::Pow, 3).unwrap();
        let g = make_grid(TRUTH_GRID_SIZE).unwrap();
        let f = t.eigenfunctions_at(g.points()).unwrap();
        let gram = crate::basis::weighted_cross(&f, &f, g.weights());
        assert!((gram - DMatrix::identity(5, 5)).amax() < 1e-8);
        assert!(bspline_field_truth(4, EigenRule::Pow, 3).is_err());
    }

    #[test]
    fn setting_three_observation_counts() {
        let spec = SimSpec::setting(ProcessSpec::Eggcrate, 3, 1).unwrap();
        let sim = simulate_dataset(&spec, &eggcrate_truth()).unwrap();
        assert_eq!(sim.dataset.n_subjects(), 500);
        assert!(sim.dataset.subjects().iter().all(|s| (3..=7).contains(&s.len())));
    }

    #[test]
    fn noiseless_observations_equal_latent() {
        let mut spec = SimSpec::setting(ProcessSpec::matern_default(), 1, 4).unwrap();
        spec.noise_var = 0.0;
        let truth = spec.process.truth().unwrap();
        let sim = simulate_dataset(&spec, &truth).unwrap();
        for (s, l) in sim.dataset.subjects().iter().zip(&sim.latent_observed) {
            assert_eq!(&s.values, l);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SimSpec::setting(ProcessSpec::Eggcrate, 1, 9).unwrap();
        let a = simulate_dataset(&spec, &eggcrate_truth()).unwrap();
        let b = simulate_dataset(&spec, &eggcrate_truth()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.latent_reference, b.latent_reference);
    }

    #[test]
    fn monte_carlo_covariance_and_noise() {
        let spec = SimSpec {
            process: ProcessSpec::Eggcrate,
            n: 20_000,
            m_min: 1,
            m_max: 1,
            noise_var: 0.25,
            seed: 11,
        };
        let truth = eggcrate_truth();
        let sim = simulate_dataset(&spec, &truth).unwrap();
        let (i, j) = (5, 30);
        let (si, sj) = (sim.reference_grid[i], sim.reference_grid[j]);
        let n = spec.n as f64;
        let xs: Vec<(f64, f64)> = sim
            .latent_reference
            .iter()
            .map(|l| (l[i] - truth.mean(si), l[j] - truth.mean(sj)))
            .collect();
        let prod: Vec<f64> = xs.iter().map(|(a, b)| a * b).collect();
        let m = prod.iter().sum::<f64>() / n;
        let sd = (prod.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        assert!((m - truth.cov(si, sj)).abs() < 3.0 * sd, "{m} vs {}", truth.cov(si, sj));
        let resid: Vec<f64> = sim
            .dataset
            .subjects()
            .iter()
            .zip(&sim.latent_observed)
            .map(|(s, l)| s.values[0] - l[0])
            .collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / n;
        // var of the sample variance is 2 sigma^4 / n
        assert!((var - 0.25).abs() < 3.0 * (2.0 * 0.0625 / n).sqrt());
    }

    #[test]
    fn matern_reference_eigenpairs_are_orthonormal() {
        let truth = ProcessSpec::matern_default().truth().unwrap();
        let g = reference_grid(REFERENCE_GRID_SIZE);
        let (lam, phi) = truth.reference_eigenpairs(&g, 4).unwrap();
        assert!(lam.windows(2).all(|w| w[0] >= w[1]));
        let w = trapezoid_weights(REFERENCE_GRID_SIZE);
        let gram = crate::basis::weighted_cross(&phi, &phi, &w);
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn truth_bundle_round_trip() {
        let b = TruthBundle::new(&eggcrate_truth(), 1.0, 3).unwrap();
        let text = serde_json::to_string(&b).unwrap();
        assert_eq!(TruthBundle::from_json(&text).unwrap(), b);
        assert!(TruthBundle::from_json("{}").is_err());
    }
}
