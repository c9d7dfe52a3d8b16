//! Estimation on data drawn from known models.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sparse_fpca::basis::{make_grid, BasisKind};
use sparse_fpca::dataset::{center, estimate_mean, MeanFunction, SparseDataset, Subject};
use sparse_fpca::infer::build_model;
use sparse_fpca::optim::{fit, OptimConfig};
use sparse_fpca::simulate::{simulate_dataset, ProcessSpec, SimSpec};

fn within(est: f64, truth: f64, rel: f64) -> bool {
    (est - truth).abs() <= rel * truth
}

/// Curves from a rank-2 model in a six-function cubic B-spline space,
/// refitted with the same basis.
#[test]
fn recovers_variances_of_a_model_in_the_basis() {
    let (q, p, n) = (6, 2, 200);
    let lambda = [4.0f64, 1.0];
    let sigma2 = 0.25f64;
    let grid = make_grid(101).unwrap();
    let basis = BasisKind::default().build(q, &grid).unwrap();
    // Orthonormal coefficient columns give orthonormal eigenfunctions.
    let raw = DMatrix::from_fn(q, p, |i, k| ((i + 1) as f64 * (k + 1) as f64).sin());
    let ctilde = raw.qr().q();
    let loadings = basis.gram_inv_sqrt() * &ctilde;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let subjects = (0..n)
        .map(|i| {
            let m = rng.random_range(5..=15);
            let mut times: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            times.sort_by(f64::total_cmp);
            let xi: Vec<f64> = lambda
                .iter()
                .map(|l| l.sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let values = times
                .iter()
                .map(|&t| {
                    let phi = loadings.transpose() * basis.eval_at(t).unwrap();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (0..p).map(|k| xi[k] * phi[k]).sum::<f64>() + sigma2.sqrt() * noise
                })
                .collect();
            Subject { id: i.to_string(), times, values }
        })
        .collect();
    let data = SparseDataset::new(subjects, 0.0, 1.0).unwrap();

    let config = OptimConfig { max_iters: 2000, ..OptimConfig::default() };
    let f = fit(&data, &basis, &grid, q, p, &config).unwrap();
    assert!(f.converged(), "{}", f.reason.as_str());
    let model = build_model(&f, &basis, &grid, MeanFunction::zero(), (0.0, 1.0), false).unwrap();
    assert!(within(model.sigma2(), sigma2, 0.2), "sigma2 {}", model.sigma2());
    for (est, truth) in model.lambda().iter().zip(lambda) {
        assert!(within(*est, truth, 0.2), "lambda {est} vs {truth}");
    }
}

#[test]
fn leading_eggcrate_eigenfunction_peaks_at_a_quarter() {
    let spec = SimSpec::setting(ProcessSpec::Eggcrate, 2, 7).unwrap();
    let sim = simulate_dataset(&spec, &spec.process.truth().unwrap()).unwrap();
    let mean = estimate_mean(&sim.dataset, 20).unwrap();
    let centered = center(&sim.dataset, &mean);
    let grid = make_grid(101).unwrap();
    let basis = BasisKind::Fourier.build(5, &grid).unwrap();
    let config = OptimConfig { max_iters: 2000, ..OptimConfig::default() };
    let f = fit(&centered, &basis, &grid, 5, 3, &config).unwrap();
    let model = build_model(&f, &basis, &grid, mean, (0.0, 1.0), false).unwrap();
    let v = model.eval_eigenfunctions(0.25).unwrap()[0];
    assert!((v.abs() - 2f64.sqrt()).abs() < 0.15, "phi_1(0.25) = {v}");
}
