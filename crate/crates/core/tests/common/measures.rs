//! Measured quantities shared by the integration tests and the acceptance
//! run. Each returns the number that gets compared to a tolerance.

use icsteer::blocks::{assemble, assemble_cost_weights};
use icsteer::lindisc::{discretize, LinearizedStep, ReferenceTrajectory, Scheme};
use icsteer::model::{finite_difference_u, finite_difference_x};
use icsteer::model::{jacobian_u, jacobian_x, DragDoubleIntegrator, Model};
use icsteer::montecarlo::{simulate_discrete_linear, violation_rate};
use icsteer::problem::{
    build_chance_constraints, spread_map, Constraint, CoreLayout, CsProblemSpec, HalfSpace,
    MeanCost,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_stable_model, zoh_oracle};

pub fn flat_reference(
    n: usize,
    nx: usize,
    nu: usize,
    sigma: f64,
    seed: u64,
) -> ReferenceTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = |d| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let states = (0..=n).map(|_| v(nx)).collect();
    let controls = (0..n).map(|_| v(nu)).collect();
    ReferenceTrajectory::new(states, controls, sigma).unwrap()
}

/// Largest entry error of `(A, B, r, Σ)` against the oracle `(Φ, B_d, Σ)`;
/// `r` must vanish for a linear model.
pub fn block_errors(
    step: &LinearizedStep,
    oracle: &(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
) -> [f64; 4] {
    [
        (&step.a - &oracle.0).amax(),
        (&step.b - &oracle.1).amax(),
        step.r.amax(),
        (&step.sigma_noise - &oracle.2).amax(),
    ]
}

/// Worst block error of the exact scheme over random stable 4×2 systems.
pub fn exact_discretization_error(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let (nx, nu, n, sigma) = (4, 2, 10, 2.0);
        let model = random_stable_model(seed, nx, nu);
        let reference = flat_reference(n, nx, nu, sigma, seed + 100);
        let steps = discretize(&model, &reference, Scheme::Exact { substeps: 10 }).unwrap();
        let oracle = zoh_oracle(
            &(model.a() * sigma),
            &(model.b() * sigma),
            model.g(),
            reference.dtau(),
        );
        for step in &steps {
            worst = block_errors(step, &oracle)
                .into_iter()
                .fold(worst, f64::max);
        }
    }
    worst
}

/// First-order scheme error on one interval for each horizon in `ns`.
pub fn first_order_errors(ns: &[usize]) -> Vec<f64> {
    let (nx, nu, sigma) = (3, 1, 1.5);
    let model = random_stable_model(7, nx, nu);
    ns.iter()
        .map(|&n| {
            let reference = flat_reference(n, nx, nu, sigma, 8);
            let steps = discretize(&model, &reference, Scheme::FirstOrder).unwrap();
            let oracle = zoh_oracle(
                &(model.a() * sigma),
                &(model.b() * sigma),
                model.g(),
                reference.dtau(),
            );
            let err = block_errors(&steps[0], &oracle);
            err[0].max(err[1]).max(err[3])
        })
        .collect()
}

fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Worst relative gap between analytic and central-difference Jacobians of
/// the drag model, alternating a weak and a strong drag coefficient.
pub fn drag_jacobian_error(points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DragDoubleIntegrator::new(0.005, 0.01).unwrap();
    let strong = DragDoubleIntegrator::new(0.8, 0.01).unwrap();
    let mut worst = 0.0f64;
    for i in 0..points {
        let m: &dyn Model = if i % 2 == 0 { &model } else { &strong };
        let x = DVector::from_fn(4, |_, _| rng.random_range(-10.0..10.0));
        let u = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let t = rng.random_range(0.0..15.0);
        let ax = jacobian_x(m, &x, &u, t).unwrap();
        let au = jacobian_u(m, &x, &u, t).unwrap();
        worst = worst
            .max(relative(&ax, &finite_difference_x(m, &x, &u, t)))
            .max(relative(&au, &finite_difference_u(m, &x, &u, t)));
    }
    worst
}

fn random_steps(rng: &mut ChaCha8Rng, n: usize, nx: usize, nu: usize) -> Vec<LinearizedStep> {
    let mut m = |r, c, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
    (0..n)
        .map(|_| {
            let g = m(nx, nx, 0.4);
            LinearizedStep {
                a: DMatrix::identity(nx, nx) + m(nx, nx, 0.2),
                b: m(nx, nu, 1.0),
                r: m(nx, 1, 1.0).column(0).into_owned(),
                sigma_noise: &g * g.transpose(),
                g,
            }
        })
        .collect()
}

/// Unbiased covariance of the columns of `x`.
fn covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = x.ncols() as f64;
    let mean = x.column_mean();
    let centered = x - &mean * DMatrix::from_element(1, x.ncols(), 1.0);
    let cov = &centered * centered.transpose() / (m - 1.0);
    (mean, cov)
}

fn stack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, blocks[0].ncols());
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Largest `|estimate − truth|` in units of the standard error of a sample
/// covariance entry, `√((P_ii P_jj + P_ij²)/(m − 1))`. Entries with zero
/// variance must match to 1e-9 or count as infinitely far off.
fn worst_cov_z(est: &DMatrix<f64>, truth: &DMatrix<f64>, m: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..truth.nrows() {
        for j in 0..=i {
            let se =
                ((truth[(i, i)] * truth[(j, j)] + truth[(i, j)].powi(2)) / (m - 1) as f64).sqrt();
            let gap = (est[(i, j)] - truth[(i, j)]).abs();
            if se == 0.0 {
                if gap > 1e-9 {
                    return f64::INFINITY;
                }
                continue;
            }
            worst = worst.max(gap / se);
        }
    }
    worst
}

fn worst_mean_z(est: &DVector<f64>, truth: &DVector<f64>, cov: &DMatrix<f64>, m: usize) -> f64 {
    (0..truth.len())
        .map(|i| (est[i] - truth[i]).abs() / (cov[(i, i)] / m as f64).sqrt().max(1e-12))
        .fold(0.0, f64::max)
}

/// Worst z-scores of sampled moments against the stacked formulas, for a
/// random discrete system under a random causal policy.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceCheck {
    pub state_cov: f64,
    pub control_cov: f64,
    pub state_mean: f64,
    pub control_mean: f64,
    pub divergent: usize,
}

impl CovarianceCheck {
    pub fn worst(&self) -> f64 {
        self.state_cov
            .max(self.control_cov)
            .max(self.state_mean)
            .max(self.control_mean)
    }
}

pub fn covariance_formula_check(seed: u64, trials: usize) -> CovarianceCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, nx, nu, sigma) = (3, 2, 1, 1.7);
    let steps = random_steps(&mut rng, n, nx, nu);
    let p_x0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
    let x0 = DVector::from_vec(vec![1.0, -0.5]);
    let blocks = assemble(&steps, sigma, &p_x0).unwrap();

    // random causal gains: row block k may use y_0..y_k
    let mut k_mat = DMatrix::zeros(n * nu, (n + 1) * nx);
    for k in 0..n {
        for c in 0..(k + 1) * nx {
            for r in 0..nu {
                k_mat[(k * nu + r, c)] = rng.random_range(-0.6..0.6);
            }
        }
    }
    let v = DVector::from_fn(n * nu, |_, _| rng.random_range(-1.0..1.0));
    let sim = simulate_discrete_linear(&steps, &v, &k_mat, &x0, &p_x0, sigma, trials, 99).unwrap();

    let px = blocks.state_covariance(&k_mat);
    let pu = blocks.control_covariance(&k_mat);
    let mean = blocks.mean_states(&x0, &v);
    let (mx, cx) = covariance(&stack(&sim.samples));
    let (mu, cu) = covariance(&stack(&sim.control_samples));
    CovarianceCheck {
        state_cov: worst_cov_z(&cx, &px, trials),
        control_cov: worst_cov_z(&cu, &pu, trials),
        state_mean: worst_mean_z(&mx, &mean, &px, trials),
        // y is zero-mean, so the controls average to V
        control_mean: worst_mean_z(&mu, &v, &pu, trials),
        divergent: sim.divergent,
    }
}

/// Violation rate of one scalar chance row placed exactly on its design
/// boundary, from `samples` draws.
pub fn calibrated_violation(p: f64, samples: usize) -> f64 {
    let (sigma, n) = (2.0, 1);
    let step = LinearizedStep {
        a: DMatrix::from_element(1, 1, 0.9),
        b: DMatrix::from_element(1, 1, 1.0),
        r: DVector::from_element(1, 0.1),
        g: DMatrix::from_element(1, 1, 0.5),
        sigma_noise: DMatrix::from_element(1, 1, 0.25),
    };
    let p_x0 = DMatrix::from_element(1, 1, 0.04);
    let x0 = DVector::from_element(1, 0.5);
    let blocks = assemble(std::slice::from_ref(&step), sigma, &p_x0).unwrap();
    let weights = assemble_cost_weights(
        &[DMatrix::identity(1, 1)],
        &[DMatrix::identity(1, 1)],
        sigma,
        n,
    )
    .unwrap();
    let mut spec = CsProblemSpec::new(
        sigma,
        x0.clone(),
        p_x0.clone(),
        DVector::zeros(1),
        DMatrix::identity(1, 1),
        MeanCost::control_energy(1.0, 1, 1),
        weights,
        1.0,
    )
    .unwrap();
    let h = HalfSpace::new(DVector::from_element(1, 1.0), 2.0, p).unwrap();
    spec.state_constraints[1].push(h.clone());
    spec.state_risk_budget[1] = p;

    let rows = build_chance_constraints(&blocks, &spec, 1.0).unwrap();
    let Constraint::Chance(row) = &rows[0] else {
        panic!("expected a chance row");
    };
    let layout = CoreLayout::new(n, 1, 1);
    let z = DVector::zeros(layout.len());
    let spread = spread_map(&blocks, &row.key).evaluate(&z).norm();
    let slope = row.mean.lin[layout.feedforward(0, 0)];
    let v = -(row.mean.offset + row.coefficient * spread) / slope;

    let sim = simulate_discrete_linear(
        &[step],
        &DVector::from_element(1, v),
        &DMatrix::zeros(1, 2),
        &x0,
        &p_x0,
        sigma,
        samples,
        7,
    )
    .unwrap();
    violation_rate(&sim, &h, 1)
}
