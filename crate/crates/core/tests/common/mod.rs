#![allow(dead_code)]

pub mod measures;

use icsteer::model::LinearModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `exp(M)` by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.abs().row_sum().max();
    let squarings = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let a = m / 2f64.powi(squarings as i32);
    let n = m.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=24 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Exact discretization of `dx/dτ = Ãx + B̃u` with noise `G dw` over `h`:
/// `(Φ, B_d, Σ)` from two block exponentials (Van Loan for `Σ`).
pub fn zoh_oracle(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    h: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = b.shape();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = expm(&(aug * h));
    let phi = e.view((0, 0), (n, n)).into_owned();
    let bd = e.view((0, n), (n, m)).into_owned();

    let mut vl = DMatrix::zeros(2 * n, 2 * n);
    vl.view_mut((0, 0), (n, n)).copy_from(&-a);
    vl.view_mut((0, n), (n, n)).copy_from(&(g * g.transpose()));
    vl.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let f = expm(&(vl * h));
    let f12 = f.view((0, n), (n, n));
    let f22 = f.view((n, n), (n, n));
    let sigma = f22.transpose() * f12;
    (phi, bd, (&sigma + sigma.transpose()) * 0.5)
}

/// A random LTI model whose drift matrix has eigenvalues with real parts
/// in roughly `[−1.5, −0.5]`.
pub fn random_stable_model(seed: u64, nx: usize, nu: usize) -> LinearModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r, c, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
    let skew = m(nx, nx, 1.0);
    let skew = (&skew - skew.transpose()) * 0.5;
    let diag = DMatrix::from_diagonal(&DVector::from_fn(nx, |i, _| -0.5 - i as f64 / nx as f64));
    let a = skew + diag;
    LinearModel::new(a, m(nx, nu, 1.0), m(nx, nx, 0.5)).unwrap()
}

use icsteer::blocks::assemble_cost_weights;
use icsteer::model::DragDoubleIntegrator;
use icsteer::problem::{ChanceRegion, CsProblemSpec, MeanCost, TrustRegion};

/// The drag double-integrator transfer with the corridor `|ξ₁| ≤ 6` at
/// risk 0.1, for a given drag coefficient. Returns the initial guess too.
pub fn drag_problem(drag: f64) -> (DragDoubleIntegrator, CsProblemSpec, Vec<DVector<f64>>) {
    let (n, sigma) = (25, 15.0);
    let model = DragDoubleIntegrator::new(drag, 0.01).unwrap();
    let weights = assemble_cost_weights(
        &vec![DMatrix::identity(4, 4) * 5.0; n],
        &vec![DMatrix::identity(2, 2); n],
        sigma,
        n,
    )
    .unwrap();
    let mut spec = CsProblemSpec::new(
        sigma,
        DVector::from_vec(vec![1.0, 8.0, 2.0, 0.0]),
        DMatrix::identity(4, 4) * 0.01,
        DVector::from_vec(vec![1.0, 2.0, -1.0, 0.0]),
        DMatrix::identity(4, 4) * 0.1,
        MeanCost::control_energy(10.0, 4, 2),
        weights,
        1000.0,
    )
    .unwrap();
    let corridor = ChanceRegion {
        normals: vec![
            DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0, 0.0, 0.0]),
        ],
        offsets: vec![6.0, 6.0],
        risk: 0.1,
    };
    spec.add_state_region(&(0..=n).collect::<Vec<_>>(), &corridor)
        .unwrap();
    spec.trust_region = Some(TrustRegion {
        state_radius: 5.0,
        control_radius: 1.0,
        state_risk: 0.1,
        control_risk: 0.1,
    });
    let guess = vec![DVector::from_vec(vec![-0.3, -0.1]); n];
    (model, spec, guess)
}
