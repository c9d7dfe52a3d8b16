//! Sparse longitudinal observations and the pooled mean function.
//!
//! Times are rescaled to `[0, 1]` on load; the original bounds are kept so
//! outputs can be reported in the input's units.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};

/// Default number of equal-width bins used by [`estimate_mean`].
pub const DEFAULT_MEAN_BINS: usize = 20;

/// A single raw measurement, in original time units.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub subject_id: String,
    pub t: f64,
    pub y: f64,
}

/// All observations of one subject, sorted by rescaled time.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Subjects in first-appearance order on the rescaled domain `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    subjects: Vec<Subject>,
    domain_min: f64,
    domain_max: f64,
}

impl SparseDataset {
    /// Builds a dataset from already-rescaled subjects.
    ///
    /// Subjects must be non-empty with sorted times in `[0, 1]`.
    pub fn new(subjects: Vec<Subject>, domain_min: f64, domain_max: f64) -> Result<Self> {
        if !(domain_min.is_finite() && domain_max.is_finite() && domain_max > domain_min) {
            return Err(FpcaError::Dataset(format!(
                "invalid domain [{domain_min}, {domain_max}]"
            )));
        }
        if subjects.is_empty() {
            return Err(FpcaError::Dataset("no subjects".into()));
        }
        for s in &subjects {
            if s.times.is_empty() {
                return Err(FpcaError::Dataset(format!("subject {} has no observations", s.id)));
            }
            if s.times.len() != s.values.len() {
                return Err(FpcaError::Dataset(format!(
                    "subject {}: {} times but {} values",
                    s.id,
                    s.times.len(),
                    s.values.len()
                )));
            }
            if s.times.windows(2).any(|w| w[1] < w[0]) {
                return Err(FpcaError::Dataset(format!("subject {}: times not sorted", s.id)));
            }
            if s.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(FpcaError::Dataset(format!(
                    "subject {}: time outside [0, 1]",
                    s.id
                )));
            }
            if s.values.iter().any(|y| !y.is_finite()) {
                return Err(FpcaError::Dataset(format!("subject {}: non-finite value", s.id)));
            }
        }
        Ok(Self {
            subjects,
            domain_min,
            domain_max,
        })
    }

    /// Groups raw observations by subject and rescales time by the pooled
    /// range. Requires at least two subjects and a non-degenerate range.
    pub fn from_observations(obs: &[Observation]) -> Result<Self> {
        if obs.is_empty() {
            return Err(FpcaError::Dataset("no observations".into()));
        }
        let (lo, hi) = obs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
                (lo.min(o.t), hi.max(o.t))
            });
        if hi <= lo {
            return Err(FpcaError::Dataset(format!(
                "all observations share the single time point {lo}; the time domain has zero width"
            )));
        }
        let ds = Self::from_observations_with_domain(obs, lo, hi)?;
        if ds.n_subjects() < 2 {
            return Err(FpcaError::Dataset(format!(
                "need at least 2 subjects, found {}",
                ds.n_subjects()
            )));
        }
        Ok(ds)
    }

    /// Like [`SparseDataset::from_observations`] but rescales with a fixed
    /// domain, e.g. the one stored in a fitted model. Observations outside
    /// the domain are rejected.
    pub fn from_observations_with_domain(
        obs: &[Observation],
        domain_min: f64,
        domain_max: f64,
    ) -> Result<Self> {
        if !(domain_max > domain_min) {
            return Err(FpcaError::Dataset(format!(
                "invalid domain [{domain_min}, {domain_max}]"
            )));
        }
        let width = domain_max - domain_min;
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<&str, Vec<(f64, f64)>> = HashMap::new();
        for o in obs {
            if !(o.t.is_finite() && o.y.is_finite()) {
                return Err(FpcaError::Dataset(format!(
                    "subject {}: non-finite observation",
                    o.subject_id
                )));
            }
            let mut s = (o.t - domain_min) / width;
            // Absorb rounding at the boundaries.
            if s < 0.0 && s > -1e-12 {
                s = 0.0;
            }
            if s > 1.0 && s < 1.0 + 1e-12 {
                s = 1.0;
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(FpcaError::Dataset(format!(
                    "subject {}: time {} outside the domain [{domain_min}, {domain_max}]",
                    o.subject_id, o.t
                )));
            }
            let entry = groups.entry(o.subject_id.as_str()).or_insert_with(|| {
                order.push(o.subject_id.clone());
                Vec::new()
            });
            entry.push((s, o.y));
        }
        let subjects = order
            .into_iter()
            .map(|id| {
                let mut rows = groups.remove(id.as_str()).unwrap_or_default();
                // Stable sort keeps file order among tied times.
                rows.sort_by(|a, b| a.0.total_cmp(&b.0));
                let (times, values) = rows.into_iter().unzip();
                Subject { id, times, values }
            })
            .collect();
        Self::new(subjects, domain_min, domain_max)
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_min, self.domain_max)
    }

    /// Maps a rescaled time back to original units.
    pub fn to_original_time(&self, s: f64) -> f64 {
        self.domain_min + s * (self.domain_max - self.domain_min)
    }

    /// The subjects at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let subjects = indices
            .iter()
            .map(|&i| {
                self.subjects.get(i).cloned().ok_or_else(|| {
                    FpcaError::Dataset(format!("subject index {i} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(subjects, self.domain_min, self.domain_max)
    }

    /// Writes the `id,t,y` CSV with times in original units.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| FpcaError::Dataset(format!("csv write failed: {e}"));
        w.write_record(["id", "t", "y"]).map_err(io)?;
        for s in &self.subjects {
            for (&t, &y) in s.times.iter().zip(&s.values) {
                w.write_record([
                    s.id.clone(),
                    format!("{}", self.to_original_time(t)),
                    format!("{y}"),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| FpcaError::Dataset(format!("csv write failed: {e}")))?;
        Ok(())
    }
}

/// Parses `id,t,y` CSV text. Row numbers in errors are file line numbers
/// (the header is line 1).
pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| FpcaError::MalformedRow {
            row: 1,
            message: format!("unreadable header: {e}"),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(FpcaError::Dataset("empty file".into()));
    }
    let cols: Vec<&str> = headers.iter().collect();
    if cols != ["id", "t", "y"] {
        return Err(FpcaError::MalformedRow {
            row: 1,
            message: format!("expected header `id,t,y`, found `{}`", cols.join(",")),
        });
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| FpcaError::MalformedRow {
            row: e.position().map(|p| p.line() as usize).unwrap_or(row),
            message: e.to_string(),
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(row);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 3 {
            let who = if rec[0].is_empty() { String::new() } else { format!("subject {}: ", &rec[0]) };
            return Err(FpcaError::MalformedRow {
                row,
                message: format!("{who}expected 3 fields, found {}", rec.len()),
            });
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(FpcaError::MalformedRow {
                row,
                message: "empty subject id".into(),
            });
        }
        let field = |idx: usize, name: &str| -> Result<f64> {
            let raw = &rec[idx];
            if raw.is_empty() {
                return Err(FpcaError::MalformedRow {
                    row,
                    message: format!("subject {id}: empty {name}"),
                });
            }
            let v: f64 = raw.parse().map_err(|_| FpcaError::MalformedRow {
                row,
                message: format!("subject {id}: {name} `{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(FpcaError::MalformedRow {
                    row,
                    message: format!("subject {id}: {name} is not finite"),
                });
            }
            Ok(v)
        };
        let t = field(1, "t")?;
        let y = field(2, "y")?;
        out.push(Observation { subject_id: id, t, y });
    }
    if out.is_empty() {
        return Err(FpcaError::Dataset("empty file: no observation rows".into()));
    }
    Ok(out)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| FpcaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and rescales an `id,t,y` CSV file.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SparseDataset> {
    let obs = parse_csv(open(path.as_ref())?)?;
    SparseDataset::from_observations(&obs)
}

/// Loads a CSV file and rescales it onto an existing domain.
pub fn load_csv_with_domain(
    path: impl AsRef<Path>,
    domain_min: f64,
    domain_max: f64,
) -> Result<SparseDataset> {
    let obs = parse_csv(open(path.as_ref())?)?;
    SparseDataset::from_observations_with_domain(&obs, domain_min, domain_max)
}

/// Natural cubic interpolant through binned pooled means.
///
/// Evaluation is constant outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeanFunctionRepr", into = "MeanFunctionRepr")]
pub struct MeanFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    second_derivs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MeanFunctionRepr {
    knots: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<MeanFunctionRepr> for MeanFunction {
    type Error = FpcaError;
    fn try_from(r: MeanFunctionRepr) -> Result<Self> {
        MeanFunction::interpolate(r.knots, r.values)
    }
}

impl From<MeanFunction> for MeanFunctionRepr {
    fn from(m: MeanFunction) -> Self {
        MeanFunctionRepr {
            knots: m.knots,
            values: m.values,
        }
    }
}

impl MeanFunction {
    /// Fits the natural cubic spline through `(knots, values)`.
    pub fn interpolate(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() != values.len() || knots.is_empty() {
            return Err(FpcaError::Dataset(
                "mean function needs matching, non-empty knots and values".into(),
            ));
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(FpcaError::Dataset("mean function has non-finite entries".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FpcaError::Dataset("mean knots must be strictly increasing".into()));
        }
        let second_derivs = natural_second_derivatives(&knots, &values);
        Ok(Self {
            knots,
            values,
            second_derivs,
        })
    }

    /// Identically zero mean on `[0, 1]`.
    pub fn zero() -> Self {
        Self {
            knots: vec![0.0, 1.0],
            values: vec![0.0, 0.0],
            second_derivs: vec![0.0, 0.0],
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.knots.len();
        if n == 1 || t <= self.knots[0] {
            return self.values[0];
        }
        if t >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        // First knot strictly greater than t.
        let hi = self.knots.partition_point(|&k| k <= t);
        let lo = hi - 1;
        let h = self.knots[hi] - self.knots[lo];
        let a = (self.knots[hi] - t) / h;
        let b = (t - self.knots[lo]) / h;
        a * self.values[lo]
            + b * self.values[hi]
            + ((a * a * a - a) * self.second_derivs[lo] + (b * b * b - b) * self.second_derivs[hi])
                * h
                * h
                / 6.0
    }
}

fn natural_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior equations.
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for i in 1..n - 1 {
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        diag[i - 1] = 2.0 * (h0 + h1);
        upper[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    for i in 1..k {
        let lower = x[i + 1] - x[i];
        let w = lower / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
    }
    m
}

/// Pools all observations, averages `(t, y)` within `n_bins` equal-width
/// bins and interpolates the bin means with a natural cubic spline.
pub fn estimate_mean(data: &SparseDataset, n_bins: usize) -> Result<MeanFunction> {
    if n_bins < 4 {
        return Err(FpcaError::Dataset(format!("n_bins must be at least 4, got {n_bins}")));
    }
    let mut sum_t = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for s in data.subjects() {
        for (&t, &y) in s.times.iter().zip(&s.values) {
            let b = ((t * n_bins as f64) as usize).min(n_bins - 1);
            sum_t[b] += t;
            sum_y[b] += y;
            count[b] += 1;
        }
    }
    let (knots, values): (Vec<f64>, Vec<f64>) = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (sum_t[b] / count[b] as f64, sum_y[b] / count[b] as f64))
        .unzip();
    if knots.len() < 4 {
        return Err(FpcaError::Dataset(format!(
            "only {} non-empty bins; a cubic mean spline needs at least 4",
            knots.len()
        )));
    }
    MeanFunction::interpolate(knots, values)
}

/// Subtracts the mean function from every observation.
pub fn center(data: &SparseDataset, mean: &MeanFunction) -> SparseDataset {
    let subjects = data
        .subjects()
        .iter()
        .map(|s| Subject {
            id: s.id.clone(),
            times: s.times.clone(),
            values: s
                .times
                .iter()
                .zip(&s.values)
                .map(|(&t, &y)| y - mean.eval(t))
                .collect(),
        })
        .collect();
    SparseDataset {
        subjects,
        domain_min: data.domain_min,
        domain_max: data.domain_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(id: &str, t: f64, y: f64) -> Observation {
        Observation {
            subject_id: id.into(),
            t,
            y,
        }
    }

    #[test]
    fn rescales_affinely() {
        let csv = "id,t,y\nA,2,1\nA,4,2\nA,6,3\nB,4,0\n";
        let ds = SparseDataset::from_observations(&parse_csv(csv.as_bytes()).unwrap()).unwrap();
        assert_eq!(ds.subjects()[0].times, vec![0.0, 0.5, 1.0]);
        assert_eq!(ds.domain(), (2.0, 6.0));
        assert_eq!(ds.to_original_time(0.5), 4.0);
    }

    #[test]
    fn single_subject_file_rescales() {
        let obs = parse_csv("id,t,y\nA,2,1\nA,4,2\nA,6,3\n".as_bytes()).unwrap();
        let ds = SparseDataset::from_observations_with_domain(&obs, 2.0, 6.0).unwrap();
        assert_eq!(ds.n_subjects(), 1);
        assert_eq!(ds.subjects()[0].times, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn groups_in_first_appearance_order() {
        let csv = "id,t,y\nA,0,1\nB,1,2\nA,2,3\n";
        let ds = SparseDataset::from_observations(&parse_csv(csv.as_bytes()).unwrap()).unwrap();
        assert_eq!(ds.n_subjects(), 2);
        assert_eq!(ds.subjects()[0].id, "A");
        assert_eq!(ds.subjects()[0].len(), 2);
        assert_eq!(ds.subjects()[1].id, "B");
    }

    #[test]
    fn sorts_within_subject() {
        let csv = "id,t,y\nA,3,30\nA,1,10\nB,2,20\n";
        let ds = SparseDataset::from_observations(&parse_csv(csv.as_bytes()).unwrap()).unwrap();
        assert_eq!(ds.subjects()[0].values, vec![10.0, 30.0]);
    }

    #[test]
    fn non_numeric_value_names_row() {
        let err = parse_csv("id,t,y\nA,1,2\nA,2,oops\n".as_bytes()).unwrap_err();
        match err {
            FpcaError::MalformedRow { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_field_names_subject() {
        let err = parse_csv("id,t,y\nA,1,2\nS7,,\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("S7"), "{err}");
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(parse_csv("".as_bytes()).is_err());
        assert!(parse_csv("id,t,y\n".as_bytes()).is_err());
    }

    #[test]
    fn zero_width_domain_is_rejected() {
        let o = vec![obs("A", 1.0, 1.0), obs("B", 1.0, 2.0)];
        let err = SparseDataset::from_observations(&o).unwrap_err();
        assert!(err.to_string().contains("zero width"));
    }

    #[test]
    fn fixed_domain_rejects_outside_points() {
        let o = vec![obs("A", 1.0, 1.0), obs("A", 5.0, 2.0)];
        assert!(SparseDataset::from_observations_with_domain(&o, 0.0, 4.0).is_err());
    }

    fn spread_dataset(f: impl Fn(f64) -> f64) -> SparseDataset {
        let subjects = (0..10)
            .map(|i| {
                let times: Vec<f64> = (0..10).map(|j| (i * 10 + j) as f64 / 99.0).collect();
                let values = times.iter().map(|&t| f(t)).collect();
                Subject {
                    id: i.to_string(),
                    times,
                    values,
                }
            })
            .collect();
        SparseDataset::new(subjects, 0.0, 1.0).unwrap()
    }

    #[test]
    fn constant_data_gives_constant_mean() {
        let ds = spread_dataset(|_| 5.0);
        let mean = estimate_mean(&ds, 20).unwrap();
        for k in 0..=100 {
            assert!((mean.eval(k as f64 / 100.0) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_reproduces_knot_values() {
        let ds = spread_dataset(|t| (6.0 * t).sin() + t * t);
        let mean = estimate_mean(&ds, 12).unwrap();
        for (k, v) in mean.knots().iter().zip(mean.values()) {
            assert!((mean.eval(*k) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_extrapolates_constantly() {
        let ds = spread_dataset(|t| t);
        let mean = estimate_mean(&ds, 10).unwrap();
        let first = mean.values()[0];
        let last = *mean.values().last().unwrap();
        assert_eq!(mean.eval(0.0), first);
        assert_eq!(mean.eval(1.0), last);
    }

    #[test]
    fn too_few_bins_is_error() {
        let subjects = vec![
            Subject {
                id: "a".into(),
                times: vec![0.1, 0.11],
                values: vec![1.0, 2.0],
            },
            Subject {
                id: "b".into(),
                times: vec![0.12],
                values: vec![1.0],
            },
        ];
        let ds = SparseDataset::new(subjects, 0.0, 1.0).unwrap();
        assert!(estimate_mean(&ds, 20).is_err());
        assert!(estimate_mean(&spread_dataset(|t| t), 3).is_err());
    }

    #[test]
    fn spline_is_exact_on_lines() {
        let m = MeanFunction::interpolate(vec![0.0, 0.2, 0.5, 0.9], vec![1.0, 1.4, 2.0, 2.8]).unwrap();
        assert!((m.eval(0.35) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn centering_cancels_mean() {
        let ds = spread_dataset(|t| 3.0 * t);
        let mean = MeanFunction::interpolate(vec![0.0, 0.5, 1.0], vec![0.0, 1.5, 3.0]).unwrap();
        let c = center(&ds, &mean);
        for s in c.subjects() {
            for v in &s.values {
                assert!(v.abs() < 1e-12);
            }
        }
        let z = MeanFunction::zero();
        assert_eq!(center(&center(&ds, &z), &z), ds);
    }

    #[test]
    fn mean_json_round_trip() {
        let m = MeanFunction::interpolate(vec![0.0, 0.3, 0.7, 1.0], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: MeanFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
