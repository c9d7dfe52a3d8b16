//! Command-line front end: `fit`, `select`, `simulate`, `bench` and
//! `predict`, driven by a JSON run configuration whose fields can be
//! overridden by flags.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{clamped_knots, make_grid, BasisKind, DEFAULT_GRID_SIZE};
use crate::dataset::{center, estimate_mean, load_csv, load_csv_with_domain, MeanFunction, SparseDataset, DEFAULT_MEAN_BINS};
use crate::error::{FpcaError, Result};
use crate::infer::{build_model, write_eigenfunctions, write_predictions, write_scores, FitDiagnostics, FittedModel};
use crate::metrics::{evaluate, write_replicates, write_summary, MetricOptions, MetricsReport, ReplicateRecord};
use crate::optim::{fit, write_trace, OptimConfig};
use crate::select::{select, write_selection, SelectConfig, SelectionResult, Strategy};
use crate::simulate::{simulate_dataset, EigenRule, ProcessSpec, SimSpec, TruthBundle};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SPARSE_FPCA_OUT";

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Simulation design used by `simulate` and `bench`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub process: ProcessSpec,
    /// Standard setting 1, 2 or 3; replaces `n`, `m_min`, `m_max` and
    /// `noise_var` when present.
    pub setting: Option<u8>,
    pub n: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub noise_var: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            process: ProcessSpec::Eggcrate,
            setting: None,
            n: 100,
            m_min: 5,
            m_max: 15,
            noise_var: 1.0,
        }
    }
}

impl SimulationConfig {
    pub fn spec(&self, seed: u64) -> Result<SimSpec> {
        let spec = match self.setting {
            Some(s) => SimSpec::setting(self.process.clone(), s, seed)?,
            None => SimSpec {
                process: self.process.clone(),
                n: self.n,
                m_min: self.m_min,
                m_max: self.m_max,
                noise_var: self.noise_var,
                seed,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Copies the standard setting into the explicit fields so individual
    /// fields can then be overridden.
    fn materialize(&mut self) -> Result<()> {
        if let Some(s) = self.setting.take() {
            let spec = SimSpec::setting(self.process.clone(), s, 0)?;
            self.n = spec.n;
            self.m_min = spec.m_min;
            self.m_max = spec.m_max;
            self.noise_var = spec.noise_var;
        }
        Ok(())
    }
}

/// Everything a run needs. Loaded from `--config` and then patched by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    /// Original time range mapped onto `[0, 1]`; the data range when absent.
    pub domain: Option<[f64; 2]>,
    pub basis: BasisKind,
    pub q: Option<usize>,
    pub p: Option<usize>,
    pub q_range: Option<Vec<usize>>,
    pub p_range: Option<Vec<usize>>,
    pub grid_size: usize,
    pub mean_bins: usize,
    pub strategy: Strategy,
    pub folds: usize,
    pub fold_seed: u64,
    pub refit_mean_per_fold: bool,
    pub optim: OptimConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Keep a model whose optimizer did not converge.
    pub force: bool,
    pub simulation: SimulationConfig,
    pub replicates: usize,
    pub components: usize,
    pub model: Option<PathBuf>,
    pub alpha: f64,
    pub eval_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            domain: None,
            basis: BasisKind::default(),
            q: None,
            p: None,
            q_range: None,
            p_range: None,
            grid_size: DEFAULT_GRID_SIZE,
            mean_bins: DEFAULT_MEAN_BINS,
            strategy: Strategy::Grid,
            folds: 5,
            fold_seed: 0,
            refit_mean_per_fold: false,
            optim: OptimConfig::default(),
            seed: 0,
            out_dir: None,
            force: false,
            simulation: SimulationConfig::default(),
            replicates: 20,
            components: 3,
            model: None,
            alpha: 0.05,
            eval_points: DEFAULT_GRID_SIZE,
        }
    }
}

/// How a benchmark replicate obtains its model.
#[derive(Debug, Clone, PartialEq)]
pub enum FitPlan {
    Fixed { q: usize, p: usize },
    Select(SelectConfig),
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FpcaError::Config(format!("invalid run configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }

    /// Optimizer settings with the run seed applied.
    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            seed: self.seed,
            ..self.optim.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(FpcaError::Config(m));
        if let (Some(q), Some(p)) = (self.q, self.p) {
            if p == 0 || q < p {
                return cfg(format!("need 1 <= p <= Q, got Q = {q}, p = {p}"));
            }
        }
        for (name, r) in [("q_range", &self.q_range), ("p_range", &self.p_range)] {
            if let Some(r) = r {
                if r.is_empty() || r.contains(&0) {
                    return cfg(format!("{name} must be a non-empty list of positive integers"));
                }
            }
        }
        if self.grid_size < 2 || self.mean_bins == 0 {
            return cfg("grid_size must be at least 2 and mean_bins positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return cfg(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.eval_points < 2 {
            return cfg("eval_points must be at least 2".into());
        }
        if self.replicates == 0 {
            return cfg("replicates must be at least 1".into());
        }
        if let Some([a, b]) = self.domain {
            if !(a.is_finite() && b.is_finite() && b > a) {
                return cfg(format!("invalid domain [{a}, {b}]"));
            }
        }
        self.optim.validate().map_err(|e| FpcaError::Config(e.to_string()))
    }

    pub fn fixed_pair(&self) -> Result<(usize, usize)> {
        match (self.q, self.p) {
            (Some(q), Some(p)) => Ok((q, p)),
            _ => Err(FpcaError::Config("both q and p are required".into())),
        }
    }

    /// Selection settings; single values stand in for missing ranges.
    pub fn select_config(&self) -> Result<SelectConfig> {
        let range = |r: &Option<Vec<usize>>, v: Option<usize>, name: &str| match (r, v) {
            (Some(r), _) => Ok(r.clone()),
            (None, Some(v)) => Ok(vec![v]),
            (None, None) => Err(FpcaError::Config(format!("{name} or its single value is required"))),
        };
        Ok(SelectConfig {
            basis: self.basis,
            grid_size: self.grid_size,
            q_range: range(&self.q_range, self.q, "q_range")?,
            p_range: range(&self.p_range, self.p, "p_range")?,
            strategy: self.strategy,
            folds: self.folds,
            fold_seed: self.fold_seed,
            mean_bins: self.mean_bins,
            refit_mean_per_fold: self.refit_mean_per_fold,
            optim: self.optim_config(),
        })
    }

    /// Selection when any range is given, a fixed pair otherwise.
    pub fn fit_plan(&self) -> Result<FitPlan> {
        if self.q_range.is_some() || self.p_range.is_some() {
            Ok(FitPlan::Select(self.select_config()?))
        } else {
            let (q, p) = self.fixed_pair()?;
            Ok(FitPlan::Fixed { q, p })
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn load_data(&self) -> Result<SparseDataset> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| FpcaError::Config("an input CSV is required".into()))?;
        match self.domain {
            Some([a, b]) => load_csv_with_domain(input, a, b),
            None => load_csv(input),
        }
    }
}

/// Basis description stored in a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub q: usize,
    /// Full clamped knot vector for B-splines.
    pub knots: Option<Vec<f64>>,
}

/// Persisted model: the continuous representation plus everything needed
/// to rebuild the grid and basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub basis: BasisSpec,
    pub grid_size: usize,
    /// `Q` rows of `p` coefficients.
    pub ctilde: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub sigma2: f64,
    pub mean: MeanFunction,
    pub domain: [f64; 2],
    pub diagnostics: FitDiagnostics,
    pub config: RunConfig,
}

impl ModelFile {
    pub fn from_model(model: &FittedModel, config: &RunConfig) -> Self {
        let kind = model.basis_kind();
        let knots = match kind {
            BasisKind::Bspline { degree } => Some(clamped_knots(model.q(), degree)),
            BasisKind::Fourier => None,
        };
        let c = model.ctilde();
        let (a, b) = model.domain();
        Self {
            schema_version: MODEL_SCHEMA_VERSION,
            basis: BasisSpec {
                kind,
                q: model.q(),
                knots,
            },
            grid_size: model.grid().len(),
            ctilde: c.row_iter().map(|r| r.iter().copied().collect()).collect(),
            eigenvalues: model.lambda().to_vec(),
            sigma2: model.sigma2(),
            mean: model.mean().clone(),
            domain: [a, b],
            diagnostics: model.diagnostics().clone(),
            config: config.clone(),
        }
    }

    pub fn to_model(&self) -> Result<FittedModel> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(FpcaError::Config(format!(
                "model schema version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let q = self.basis.q;
        if let BasisKind::Bspline { degree } = self.basis.kind {
            if self.basis.knots.as_deref() != Some(clamped_knots(q, degree).as_slice()) {
                return Err(FpcaError::Config("stored knots do not match the basis".into()));
            }
        }
        let p = self.eigenvalues.len();
        if self.ctilde.len() != q || self.ctilde.iter().any(|r| r.len() != p) {
            return Err(FpcaError::Config(format!("coefficient matrix must be {q}x{p}")));
        }
        let grid = make_grid(self.grid_size)?;
        let basis = self.basis.kind.build(q, &grid)?;
        let ctilde = DMatrix::from_fn(q, p, |i, j| self.ctilde[i][j]);
        FittedModel::new(
            basis,
            grid,
            ctilde,
            self.eigenvalues.clone(),
            self.sigma2,
            self.mean.clone(),
            (self.domain[0], self.domain[1]),
            self.diagnostics.clone(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| FpcaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FpcaError + '_ {
    move |source| FpcaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir/name` and hands a buffered writer to `body`.
fn write_file<F>(dir: &Path, name: &str, body: F) -> Result<PathBuf>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    body(&mut w)?;
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

fn save_model(dir: &Path, model: &FittedModel, config: &RunConfig) -> Result<()> {
    let json = ModelFile::from_model(model, config).to_json()?;
    write_file(dir, "model.json", |w| w.write_all(json.as_bytes()).map_err(io_err(&dir.join("model.json"))))?;
    write_file(dir, "eigenfunctions.csv", |w| write_eigenfunctions(model, w))?;
    Ok(())
}

/// Mean, centering, one fit and the resulting model.
pub fn fit_model(data: &SparseDataset, config: &RunConfig, q: usize, p: usize) -> Result<(FittedModel, crate::optim::FitResult)> {
    let mean = estimate_mean(data, config.mean_bins)?;
    let centered = center(data, &mean);
    let grid = make_grid(config.grid_size)?;
    let basis = config.basis.build(q, &grid)?;
    let f = fit(&centered, &basis, &grid, q, p, &config.optim_config())?;
    let model = build_model(&f, &basis, &grid, mean, data.domain(), config.force)?;
    Ok((model, f))
}

/// Builds the model of the selected candidate.
pub fn selected_model(result: &SelectionResult, data: &SparseDataset, config: &RunConfig) -> Result<FittedModel> {
    let rep = result.chosen_report();
    let fit = rep.fit.as_ref().expect("chosen candidate has a fit");
    let grid = make_grid(config.grid_size)?;
    let basis = config.basis.build(rep.q, &grid)?;
    build_model(fit, &basis, &grid, result.mean.clone(), data.domain(), config.force)
}

pub fn cmd_fit(config: &RunConfig) -> Result<FittedModel> {
    let (q, p) = config.fixed_pair()?;
    let data = config.load_data()?;
    let (model, f) = fit_model(&data, config, q, p)?;
    let dir = config.output_dir();
    save_model(&dir, &model, config)?;
    if config.optim.record_trace {
        write_file(&dir, "trace.csv", |w| write_trace(&f.trace, w))?;
    }
    log::info!(
        "fit Q={q} p={p}: nll {:.6}, {} ({} iterations)",
        f.nll,
        f.reason.as_str(),
        f.iterations
    );
    Ok(model)
}

pub fn cmd_select(config: &RunConfig) -> Result<SelectionResult> {
    let data = config.load_data()?;
    let result = select(&data, &config.select_config()?)?;
    let dir = config.output_dir();
    write_file(&dir, "selection.csv", |w| write_selection(&result.candidates, w))?;
    let model = selected_model(&result, &data, config)?;
    let mut echo = config.clone();
    (echo.q, echo.p) = (Some(result.chosen.0), Some(result.chosen.1));
    save_model(&dir, &model, &echo)?;
    log::info!("selected Q={} p={}", result.chosen.0, result.chosen.1);
    Ok(result)
}

pub fn cmd_simulate(config: &RunConfig) -> Result<SimSpec> {
    let spec = config.simulation.spec(config.seed)?;
    let truth = spec.process.truth()?;
    let sim = simulate_dataset(&spec, &truth)?;
    let bundle = TruthBundle::new(&truth, spec.noise_var, config.components)?;
    let dir = config.output_dir();
    write_file(&dir, "data.csv", |w| sim.dataset.write_csv(w))?;
    let json = serde_json::to_string_pretty(&bundle)? + "\n";
    write_file(&dir, "truth.json", |w| w.write_all(json.as_bytes()).map_err(io_err(&dir.join("truth.json"))))?;
    write_file(&dir, "latent_observed.csv", |w| {
        let rows = sim.dataset.subjects().iter().zip(&sim.latent_observed).flat_map(|(s, x)| {
            s.times.iter().zip(x).map(move |(t, v)| (s.id.clone(), *t, *v))
        });
        write_curves(rows, w)
    })?;
    write_file(&dir, "latent_reference.csv", |w| {
        let grid = &sim.reference_grid;
        let rows = sim.dataset.subjects().iter().zip(&sim.latent_reference).flat_map(|(s, x)| {
            grid.iter().zip(x).map(move |(t, v)| (s.id.clone(), *t, *v))
        });
        write_curves(rows, w)
    })?;
    Ok(spec)
}

fn write_curves<W: Write>(rows: impl Iterator<Item = (String, f64, f64)>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| FpcaError::Simulate(format!("writing latent curves: {e}"));
    w.write_record(["id", "t", "x"]).map_err(err)?;
    for (id, t, x) in rows {
        w.write_record([id, t.to_string(), x.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| FpcaError::Simulate(e.to_string()))
}

/// One benchmark replicate with its model when it succeeded.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub record: ReplicateRecord,
    pub model: Option<FittedModel>,
    pub selection: Option<SelectionResult>,
}

/// Simulate, fit or select, and score one replicate. Failures are kept in
/// the record.
pub fn run_replicate(
    replicate: usize,
    spec: &SimSpec,
    truth: &TruthBundle,
    plan: &FitPlan,
    config: &RunConfig,
) -> ReplicateOutcome {
    let start = Instant::now();
    let mut selection = None;
    let result = (|| -> Result<(FittedModel, bool, MetricsReport)> {
        let sim = simulate_dataset(spec, &spec.process.truth()?)?;
        let (model, converged) = match plan {
            FitPlan::Fixed { q, p } => {
                let (m, f) = fit_model(&sim.dataset, config, *q, *p)?;
                (m, f.converged())
            }
            FitPlan::Select(sc) => {
                let r = select(&sim.dataset, sc)?;
                let m = selected_model(&r, &sim.dataset, config)?;
                let ok = r.candidates.iter().all(|c| c.converged());
                selection = Some(r);
                (m, ok)
            }
        };
        let opts = MetricOptions {
            components: config.components,
            ..MetricOptions::default()
        };
        let report = evaluate(&model, truth, &sim.dataset, &sim.latent_reference, opts)?;
        Ok((model, converged, report))
    })();
    let seconds = start.elapsed().as_secs_f64();
    let (model, record) = match result {
        Ok((model, converged, report)) => {
            let rec = ReplicateRecord {
                replicate,
                seed: spec.seed,
                q: model.q(),
                p: model.p(),
                converged,
                seconds,
                report: Some(report),
                error: None,
            };
            (Some(model), rec)
        }
        Err(e) => {
            log::warn!("replicate {replicate} failed: {e}");
            let rec = ReplicateRecord {
                replicate,
                seed: spec.seed,
                q: 0,
                p: 0,
                converged: false,
                seconds,
                report: None,
                error: Some(e.to_string()),
            };
            (None, rec)
        }
    };
    ReplicateOutcome {
        record,
        model,
        selection,
    }
}

/// All replicates of a benchmark, in replicate order. Replicate `r` uses
/// data seed `seed + r`.
pub fn bench(config: &RunConfig) -> Result<Vec<ReplicateOutcome>> {
    let plan = config.fit_plan()?;
    let base = config.simulation.spec(config.seed)?;
    let truth = TruthBundle::new(&base.process.truth()?, base.noise_var, config.components)?;
    Ok((0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let spec = SimSpec {
                seed: config.seed + r as u64,
                ..base.clone()
            };
            run_replicate(r, &spec, &truth, &plan, config)
        })
        .collect())
}

pub fn cmd_bench(config: &RunConfig) -> Result<Vec<ReplicateRecord>> {
    let records: Vec<ReplicateRecord> = bench(config)?.into_iter().map(|o| o.record).collect();
    let dir = config.output_dir();
    write_file(&dir, "metrics.csv", |w| write_replicates(&records, config.components, w))?;
    write_file(&dir, "summary.csv", |w| write_summary(&records, config.components, w))?;
    let failed = records.iter().filter(|r| !r.converged).count();
    if failed > 0 {
        log::warn!("{failed} of {} replicates failed or did not converge", records.len());
    }
    Ok(records)
}

/// Equispaced evaluation points on `[0, 1]`.
pub fn eval_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

pub fn cmd_predict(config: &RunConfig) -> Result<usize> {
    let path = config
        .model
        .as_ref()
        .ok_or_else(|| FpcaError::Config("a model file is required".into()))?;
    let model = ModelFile::load(path)?.to_model()?;
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| FpcaError::Config("an input CSV is required".into()))?;
    let (a, b) = model.domain();
    let data = load_csv_with_domain(input, a, b)?;
    let ts = eval_grid(config.eval_points);
    let preds = model.predict_with_bands(&data, &ts, config.alpha)?;
    let ids: Vec<String> = data.subjects().iter().map(|s| s.id.clone()).collect();
    let scores = model.scores(&data)?;
    let dir = config.output_dir();
    write_file(&dir, "predictions.csv", |w| write_predictions(&preds, (a, b), w))?;
    write_file(&dir, "scores.csv", |w| write_scores(&ids, &scores, w))?;
    Ok(preds.iter().map(|p| p.times.len()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Bspline,
    Fourier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Grid,
    Sequential,
    Cv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProcessArg {
    Eggcrate,
    Matern,
    BsplinePow,
    BsplineSpiked,
}

/// A list of positive integers given as `a..b` (inclusive) or `a,b,c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexList(pub Vec<usize>);

fn parse_range(s: &str) -> std::result::Result<IndexList, String> {
    parse_list(s).map(IndexList)
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let bad = || format!("`{s}` is not a range like `5..11` or a list like `5,8,10`");
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

/// Flags overriding fields of the run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for candidates and replicates.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (defaults to $SPARSE_FPCA_OUT, then `.`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true, num_args = 2, value_names = ["MIN", "MAX"])]
    pub domain: Option<Vec<f64>>,
    #[arg(long, global = true, value_enum)]
    pub basis: Option<BasisArg>,
    /// B-spline degree.
    #[arg(long, global = true)]
    pub degree: Option<usize>,
    #[arg(long, global = true)]
    pub q: Option<usize>,
    #[arg(long, global = true)]
    pub p: Option<usize>,
    #[arg(long, global = true, value_parser = parse_range)]
    pub q_range: Option<IndexList>,
    #[arg(long, global = true, value_parser = parse_range)]
    pub p_range: Option<IndexList>,
    #[arg(long, global = true)]
    pub grid_size: Option<usize>,
    #[arg(long, global = true)]
    pub mean_bins: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    #[arg(long, global = true)]
    pub fold_seed: Option<u64>,
    #[arg(long, global = true)]
    pub refit_mean_per_fold: bool,
    #[arg(long, global = true)]
    pub max_iters: Option<usize>,
    #[arg(long, global = true)]
    pub restarts: Option<usize>,
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum)]
    pub process: Option<ProcessArg>,
    #[arg(long, global = true)]
    pub setting: Option<u8>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub m_min: Option<usize>,
    #[arg(long, global = true)]
    pub m_max: Option<usize>,
    #[arg(long, global = true)]
    pub noise_var: Option<f64>,
    #[arg(long, global = true)]
    pub replicates: Option<usize>,
    #[arg(long, global = true)]
    pub components: Option<usize>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub eval_points: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone().into();
                }
            )*};
        }
        set!(seed, input, q, p, grid_size, mean_bins, folds, fold_seed, replicates, components, model, alpha, eval_points);
        if let Some(r) = &self.q_range {
            c.q_range = Some(r.0.clone());
        }
        if let Some(r) = &self.p_range {
            c.p_range = Some(r.0.clone());
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = Some(d.clone());
        }
        if let Some(d) = &self.domain {
            c.domain = Some([d[0], d[1]]);
        }
        let degree = self.degree.or(match c.basis {
            BasisKind::Bspline { degree } => Some(degree),
            BasisKind::Fourier => None,
        });
        match self.basis {
            Some(BasisArg::Fourier) => c.basis = BasisKind::Fourier,
            Some(BasisArg::Bspline) => c.basis = BasisKind::Bspline { degree: degree.unwrap_or(3) },
            None => {
                if let (Some(d), BasisKind::Bspline { .. }) = (self.degree, c.basis) {
                    c.basis = BasisKind::Bspline { degree: d };
                }
            }
        }
        if let Some(s) = self.strategy {
            c.strategy = match s {
                StrategyArg::Grid => Strategy::Grid,
                StrategyArg::Sequential => Strategy::Sequential,
                StrategyArg::Cv => Strategy::Cv,
            };
        }
        c.refit_mean_per_fold |= self.refit_mean_per_fold;
        c.force |= self.force;
        if let Some(v) = self.max_iters {
            c.optim.max_iters = v;
        }
        if let Some(v) = self.restarts {
            c.optim.n_restarts = v;
        }
        let sim = &mut c.simulation;
        if let Some(p) = self.process {
            sim.process = match p {
                ProcessArg::Eggcrate => ProcessSpec::Eggcrate,
                ProcessArg::Matern => ProcessSpec::matern_default(),
                ProcessArg::BsplinePow => ProcessSpec::BsplineField {
                    q: 10,
                    rule: EigenRule::Pow,
                    seed: 0,
                },
                ProcessArg::BsplineSpiked => ProcessSpec::BsplineField {
                    q: 10,
                    rule: EigenRule::Spiked,
                    seed: 0,
                },
            };
        }
        if let Some(s) = self.setting {
            sim.setting = Some(s);
        }
        if self.n.is_some() || self.m_min.is_some() || self.m_max.is_some() || self.noise_var.is_some() {
            sim.materialize()?;
            set_sim(sim, self);
        }
        Ok(())
    }
}

fn set_sim(sim: &mut SimulationConfig, o: &Overrides) {
    if let Some(v) = o.n {
        sim.n = v;
    }
    if let Some(v) = o.m_min {
        sim.m_min = v;
    }
    if let Some(v) = o.m_max {
        sim.m_max = v;
    }
    if let Some(v) = o.noise_var {
        sim.noise_var = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit one (Q, p) model and write model.json and eigenfunctions.csv.
    Fit,
    /// Choose (Q, p) and write selection.csv plus the winning model.
    Select,
    /// Draw a dataset and write data.csv, truth.json and latent curves.
    Simulate,
    /// Replicated simulate-fit-score runs; writes metrics.csv and summary.csv.
    Bench,
    /// Scores and banded predictions from a saved model.
    Predict,
}

#[derive(Debug, Parser)]
#[command(name = "sparse-fpca", version, about = "Functional PCA for sparse longitudinal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl Cli {
    /// Configuration file patched by the flags, validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.overrides.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.overrides.apply(&mut config)?;
        config.validate()?;
        Ok(config)
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let config = cli.resolve()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.overrides.jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool
        .build()
        .map_err(|e| FpcaError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Fit => cmd_fit(&config).map(|_| ()),
        Command::Select => cmd_select(&config).map(|_| ()),
        Command::Simulate => cmd_simulate(&config).map(|_| ()),
        Command::Bench => cmd_bench(&config).map(|_| ()),
        Command::Predict => cmd_predict(&config).map(|_| ()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_list("5..11").unwrap(), (5..=11).collect::<Vec<_>>());
        assert_eq!(parse_list("5..=7").unwrap(), vec![5, 6, 7]);
        assert_eq!(parse_list("5, 10,20").unwrap(), vec![5, 10, 20]);
        assert!(parse_list("7..5").is_err());
        assert!(parse_list("a").is_err());
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_pairs() {
        assert!(matches!(RunConfig::from_json(r#"{"qq": 3}"#), Err(FpcaError::Config(_))));
        let c = RunConfig::from_json(r#"{"q": 2, "p": 3}"#).unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::from_json(r#"{"q": 8, "p": 3, "optim": {"max_iters": 10}}"#).unwrap();
        c.validate().unwrap();
        assert_eq!(c.optim.max_iters, 10);
        assert_eq!(c.fit_plan().unwrap(), FitPlan::Fixed { q: 8, p: 3 });
    }

    #[test]
    fn flags_override_the_file() {
        let cli = Cli::try_parse_from([
            "sparse-fpca", "bench", "--seed", "9", "--basis", "fourier", "--q-range", "5..7", "--p", "2",
            "--setting", "1", "--n", "30",
        ])
        .unwrap();
        let c = cli.resolve().unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.basis, BasisKind::Fourier);
        let spec = c.simulation.spec(c.seed).unwrap();
        assert_eq!((spec.n, spec.m_min, spec.m_max, spec.noise_var), (30, 5, 15, 1.0));
        match c.fit_plan().unwrap() {
            FitPlan::Select(s) => assert_eq!((s.q_range, s.p_range), (vec![5, 6, 7], vec![2])),
            other => panic!("unexpected plan {other:?}"),
        }
        assert_eq!(c.optim_config().seed, 9);
    }

    #[test]
    fn output_dir_precedence() {
        let c = RunConfig {
            out_dir: Some("x".into()),
            ..RunConfig::default()
        };
        assert_eq!(c.output_dir(), PathBuf::from("x"));
    }
}
