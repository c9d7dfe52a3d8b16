//! Randomized invariants of the orthonormalization and the likelihood.

use nalgebra::DMatrix;
use proptest::prelude::*;

use sparse_fpca::basis::{make_grid, weighted_cross, BasisKind};
use sparse_fpca::dataset::{SparseDataset, Subject};
use sparse_fpca::mgs::{mgs_gauge_check, mgs_orthonormalize};
use sparse_fpca::model::{nll, ParamVector};

fn matrix(q: usize, p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, q * p).prop_map(move |v| DMatrix::from_vec(q, p, v))
}

fn gauge(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (prop::collection::vec(0.2..3.0f64, p), prop::collection::vec(-1.0..1.0f64, p * p)).prop_map(move |(d, off)| {
        DMatrix::from_fn(p, p, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => d[i],
            std::cmp::Ordering::Less => off[i * p + j],
            std::cmp::Ordering::Greater => 0.0,
        })
    })
}

fn frame_case() -> impl Strategy<Value = (usize, DMatrix<f64>, DMatrix<f64>)> {
    (4usize..=12, 1usize..=4).prop_flat_map(|(q, p)| (Just(q), matrix(q, p), gauge(p)))
}

fn subjects() -> impl Strategy<Value = Vec<Subject>> {
    prop::collection::vec(prop::collection::vec((0.0..1.0f64, -3.0..3.0f64), 1..8), 2..10).prop_map(|subs| {
        subs.into_iter()
            .enumerate()
            .map(|(i, mut obs)| {
                obs.sort_by(|a, b| a.0.total_cmp(&b.0));
                Subject {
                    id: format!("s{i}"),
                    times: obs.iter().map(|o| o.0).collect(),
                    values: obs.iter().map(|o| o.1).collect(),
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The frame is grid-orthonormal and unchanged by an upper-triangular
    /// gauge with positive diagonal.
    #[test]
    fn frame_is_orthonormal_and_gauge_free((q, c, r) in frame_case()) {
        let grid = make_grid(61).unwrap();
        let basis = BasisKind::default().build(q, &grid).unwrap();
        let u = basis.matrix() * &c;
        prop_assume!(u.clone().svd(false, false).singular_values.min() > 1e-3);
        let frame = mgs_orthonormalize(&u, &grid).unwrap();
        let gram = weighted_cross(&frame.phi, &frame.phi, grid.weights());
        let p = c.ncols();
        prop_assert!((gram - DMatrix::identity(p, p)).amax() < 1e-9);
        prop_assert!(mgs_gauge_check(&c, &r, &basis, &grid).unwrap() < 1e-8);
    }

    /// The average negative log-likelihood does not depend on subject order.
    #[test]
    fn nll_ignores_subject_order(subs in subjects(), c in matrix(5, 2), shift in 1usize..10) {
        let grid = make_grid(51).unwrap();
        let basis = BasisKind::Fourier.build(5, &grid).unwrap();
        let params = ParamVector::new(c, vec![0.3, -0.5], -1.0).unwrap();
        let mut rotated = subs.clone();
        rotated.rotate_left(shift % subs.len());
        rotated.reverse();
        let a = nll(&params, &SparseDataset::new(subs, 0.0, 1.0).unwrap(), &basis, &grid);
        let b = nll(&params, &SparseDataset::new(rotated, 0.0, 1.0).unwrap(), &basis, &grid);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0)),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }
}
