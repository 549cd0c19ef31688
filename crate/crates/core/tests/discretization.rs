//! Discretization against a matrix-exponential oracle and the model
//! Jacobians against finite differences.

mod common;

use common::measures::{
    drag_jacobian_error, exact_discretization_error, first_order_errors, flat_reference,
};
use common::random_stable_model;
use icsteer::lindisc::{discretize, discretize_exact, ReferenceTrajectory, Scheme};
use icsteer::model::{jacobian_x, DragDoubleIntegrator};
use nalgebra::DVector;

#[test]
fn exact_discretization_matches_matrix_exponential() {
    let worst = exact_discretization_error(0..5);
    assert!(worst <= 1e-8, "worst block error {worst:e}");
}

#[test]
fn noise_factor_reproduces_discrete_covariance() {
    let model = random_stable_model(3, 4, 2);
    let reference = flat_reference(6, 4, 2, 2.0, 9);
    for scheme in [Scheme::Exact { substeps: 10 }, Scheme::FirstOrder] {
        for step in discretize(&model, &reference, scheme).unwrap() {
            assert!((&step.g * step.g.transpose() - &step.sigma_noise).amax() <= 1e-12);
        }
    }
}

#[test]
fn exact_discretization_reproduces_nonlinear_flow() {
    // Φ is the sensitivity of the RK4 flow: perturb x̂_k and compare.
    let model = DragDoubleIntegrator::new(0.3, 0.01).unwrap();
    let (n, sigma) = (5, 3.0);
    let states = (0..=n)
        .map(|k| DVector::from_vec(vec![0.0, 1.0, 2.0 - 0.2 * k as f64, 1.0]))
        .collect();
    let controls = vec![DVector::from_vec(vec![0.4, -0.2]); n];
    let reference = ReferenceTrajectory::new(states, controls, sigma).unwrap();
    let k = 2;
    let step = discretize_exact(&model, &reference, k, 200).unwrap();
    let flow = |x: &DVector<f64>| {
        icsteer::ics::propagate_mean(
            &model,
            &[reference.controls[k].clone()],
            sigma / n as f64,
            x,
            200,
        )
        .unwrap()[1]
            .clone()
    };
    let x = &reference.states[k];
    let base = flow(x);
    // affine model is exact at the reference point
    let affine = &step.a * x + &step.b * &reference.controls[k] + &step.r;
    assert!(
        (&affine - &base).amax() <= 1e-9,
        "{}",
        (&affine - &base).amax()
    );
    let h = 1e-6;
    for j in 0..4 {
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        let col = (flow(&xp) - flow(&xm)) / (2.0 * h);
        assert!((col - step.a.column(j)).amax() <= 1e-7);
    }
}

#[test]
fn first_order_error_shrinks_fourfold_when_the_interval_halves() {
    let errors = first_order_errors(&[10, 20, 40, 80]);
    for pair in errors.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!((3.5..=4.5).contains(&ratio), "{errors:?}");
    }
}

#[test]
fn drag_jacobians_match_finite_differences() {
    let worst = drag_jacobian_error(1000, 2024);
    assert!(worst <= 1e-6, "worst relative error {worst:e}");
}

#[test]
fn jacobian_helpers_check_dimensions() {
    let model = DragDoubleIntegrator::new(0.005, 0.01).unwrap();
    let x = DVector::zeros(3);
    let u = DVector::zeros(2);
    assert!(jacobian_x(&model, &x, &u, 0.0).is_err());
}
