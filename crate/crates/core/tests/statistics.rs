//! Monte Carlo estimates against the closed-form covariance formulas and
//! the chance-constraint tightening.

mod common;

use common::measures::{calibrated_violation, covariance_formula_check};
use icsteer::montecarlo::confidence_ellipse;
use icsteer::problem::inverse_normal_cdf;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn stacked_covariances_match_block_formulas() {
    let check = covariance_formula_check(5, 10_000);
    assert_eq!(check.divergent, 0);
    assert!(check.worst() <= 3.0, "{check:?}");
}

#[test]
fn tight_chance_rows_are_calibrated() {
    for p in [0.01, 0.05, 0.1] {
        let rate = calibrated_violation(p, 100_000);
        assert!((rate - p).abs() <= 0.01, "p = {p}: violation {rate}");
    }
    // the coefficient is the Gaussian quantile
    assert!((inverse_normal_cdf(0.95).unwrap() - 1.6448536269514729).abs() <= 1e-12);
}

#[test]
fn ninety_percent_ellipse_contains_ninety_percent() {
    let mean = [1.0, -2.0];
    let cov = [[2.0, 0.7], [0.7, 0.5]];
    let e = confidence_ellipse(mean, cov, 0.9).unwrap();
    let l = DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]])
        .cholesky()
        .unwrap()
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 100_000;
    let inside = (0..m)
        .filter(|_| {
            let w = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &l * w;
            e.contains([mean[0] + x[0], mean[1] + x[1]])
        })
        .count();
    let frac = inside as f64 / m as f64;
    assert!((frac - 0.9).abs() <= 0.01, "{frac}");
}
