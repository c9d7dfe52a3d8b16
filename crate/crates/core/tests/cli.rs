//! End-to-end runs of the `sparse-fpca` binary.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use sparse_fpca::cli::ModelFile;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-fpca"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("SPARSE_FPCA_OUT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn subject_ids(csv: &str) -> BTreeSet<String> {
    csv.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect()
}

/// A small egg-crate dataset in `dir/sim`.
fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--setting", "1", "--seed", "4", "--out-dir", "sim"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["fit", "--input", "nowhere.csv", "--q", "5", "--p", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"q": 5, "p": 2, "bogus": 1}"#).unwrap();
    let out = run(dir.path(), &["fit", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["fit", "--q", "2", "--p", "3", "--input", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_the_requested_design_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &[]);
    let data = read(dir.path().join("sim/data.csv"));
    assert_eq!(subject_ids(&data).len(), 50);
    ok(dir.path(), &["simulate", "--setting", "1", "--seed", "4", "--out-dir", "again"]);
    assert_eq!(data, read(dir.path().join("again/data.csv")));
    assert_eq!(read(dir.path().join("sim/truth.json")), read(dir.path().join("again/truth.json")));
}

#[test]
fn noiseless_simulation_matches_latent_curves() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--noise-var", "0"]);
    let data = read(dir.path().join("sim/data.csv"));
    let latent = read(dir.path().join("sim/latent_observed.csv"));
    let (a, b): (Vec<&str>, Vec<&str>) = (data.lines().skip(1).collect(), latent.lines().skip(1).collect());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        let x: Vec<f64> = x.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        let y: Vec<f64> = y.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(x, y);
    }
}

#[test]
fn fit_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, &[]);
    let fit = ["fit", "--input", "sim/data.csv", "--domain", "0", "1", "--basis", "fourier", "--q", "5", "--p", "3"];
    ok(d, &[&fit[..], &["--out-dir", "a"]].concat());
    ok(d, &[&fit[..], &["--out-dir", "b"]].concat());
    let model = read(d.join("a/model.json"));
    assert_eq!(model.replace("\"a\"", "\"b\""), read(d.join("b/model.json")));

    let loaded = ModelFile::load(&d.join("a/model.json")).unwrap();
    assert_eq!(loaded.to_json().unwrap(), model);
    let rebuilt = ModelFile::from_model(&loaded.to_model().unwrap(), &loaded.config);
    assert_eq!(rebuilt.to_json().unwrap(), model);

    let eig = read(d.join("a/eigenfunctions.csv"));
    assert!(eig.starts_with("t,phi_1,phi_2,phi_3\n"));
    assert_eq!(eig.lines().count(), 102);

    ok(d, &["predict", "--model", "a/model.json", "--input", "sim/data.csv", "--eval-points", "25", "--out-dir", "p"]);
    let preds = read(d.join("p/predictions.csv"));
    assert!(preds.starts_with("id,t,yhat,lo,hi\n"));
    assert_eq!(preds.lines().count() - 1, 50 * 25);
    for line in preds.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert!(v[1] <= v[0] && v[0] <= v[2]);
    }
    let scores = read(d.join("p/scores.csv"));
    assert!(scores.starts_with("id,xi_1,xi_2,xi_3\n"));
    assert_eq!(scores.lines().count(), 51);
}

#[test]
fn predict_rejects_a_row_without_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, &[]);
    ok(d, &["fit", "--input", "sim/data.csv", "--domain", "0", "1", "--basis", "fourier", "--q", "5", "--p", "2", "--out-dir", "m"]);
    std::fs::write(d.join("bad.csv"), "id,t,y\n1,0.2,1.0\n7,,\n").unwrap();
    let out = run(d, &["predict", "--model", "m/model.json", "--input", "bad.csv", "--out-dir", "p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("subject 7"));
}

#[test]
fn selection_tables_have_one_row_per_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, &["--n", "60", "--process", "bspline-pow", "--noise-var", "0.0625"]);
    let base = ["select", "--input", "sim/data.csv", "--q-range", "8..15", "--p-range", "2..6"];
    ok(d, &[&base[..], &["--strategy", "sequential", "--out-dir", "seq"]].concat());
    assert_eq!(read(d.join("seq/selection.csv")).lines().count() - 1, 13);
    ok(d, &[&base[..], &["--strategy", "grid", "--out-dir", "grid", "--jobs", "2"]].concat());
    let grid = read(d.join("grid/selection.csv"));
    assert!(grid.starts_with("Q,p,nll,aic,cv,converged,seconds\n"));
    assert_eq!(grid.lines().count() - 1, 40);
    assert!(d.join("grid/model.json").exists());

    ok(d, &["select", "--input", "sim/data.csv", "--q-range", "8", "--p-range", "2", "--out-dir", "one"]);
    assert_eq!(read(d.join("one/selection.csv")).lines().count() - 1, 1);
}

#[test]
fn bench_with_one_replicate_summarizes_it() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["bench", "--setting", "1", "--basis", "fourier", "--q", "5", "--p", "3", "--replicates", "1", "--out-dir", "b"]);
    let metrics = read(d.join("b/metrics.csv"));
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    let summary = read(d.join("b/summary.csv"));
    let median = |name: &str| -> f64 {
        let line = summary.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        line.split(',').nth(2).unwrap().parse().unwrap()
    };
    assert!((median("rmse_phi_1") - 100.0 * col("rmse_phi_1")).abs() < 1e-9);
    assert!((median("se_sigma2") - 100.0 * col("se_sigma2")).abs() < 1e-9);
    assert_eq!(median("convergence_rate"), 1.0);
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sparse-fpca"))
        .args(["simulate", "--setting", "1"])
        .current_dir(dir.path())
        .env("SPARSE_FPCA_OUT", "from-env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/data.csv").exists());
}
