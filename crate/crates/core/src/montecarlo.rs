//! Closed-loop Monte Carlo validation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::lindisc::{psd_sqrt, LinearizedStep};
use crate::model::Model;
use crate::problem::{HalfSpace, Policy};
use crate::{Error, Result};

/// Trials that fail are tolerated up to this fraction.
const MAX_DIVERGENT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub trials: usize,
    /// Euler–Maruyama steps per interval. The drift error is first order in
    /// the step, so coarse settings bias positions of fast-decelerating
    /// trajectories.
    pub substeps: usize,
    pub seed: u64,
    /// Keep every trial's substep path.
    pub record_full_paths: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            trials: 5000,
            substeps: 100,
            seed: 0,
            record_full_paths: false,
        }
    }
}

impl SimOptions {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.substeps == 0 {
            return Err(Error::InvalidArgument(
                "need trials ≥ 1 and substeps ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// State samples per step, one column per retained trial.
    pub samples: Vec<DMatrix<f64>>,
    /// Applied controls per step, one column per retained trial.
    pub control_samples: Vec<DMatrix<f64>>,
    /// Substep paths (`n_x × (N·substeps + 1)`) when requested.
    pub paths: Option<Vec<DMatrix<f64>>>,
    pub trials: usize,
    pub divergent: usize,
}

impl SimulationResult {
    pub fn steps(&self) -> usize {
        self.means.len() - 1
    }

    pub fn terminal_mean(&self) -> &DVector<f64> {
        self.means.last().expect("at least one step")
    }

    pub fn terminal_covariance(&self) -> &DMatrix<f64> {
        self.covariances.last().expect("at least one step")
    }

    /// Violation rate of every half-space at every step, indexed like the
    /// input.
    pub fn violation_rates(&self, constraints: &[Vec<HalfSpace>]) -> Vec<Vec<f64>> {
        constraints
            .iter()
            .enumerate()
            .take(self.samples.len())
            .map(|(k, hs)| hs.iter().map(|h| violation_rate(self, h, k)).collect())
            .collect()
    }

    /// Empirical covariance of the controls at step `k`.
    pub fn control_covariance(&self, k: usize) -> DMatrix<f64> {
        sample_moments(&self.control_samples[k]).1
    }
}

/// Fraction of retained trials with `aᵀx_k > α`.
pub fn violation_rate(result: &SimulationResult, half_space: &HalfSpace, k: usize) -> f64 {
    let s = &result.samples[k];
    if s.ncols() == 0 {
        return 0.0;
    }
    let hits = s
        .column_iter()
        .filter(|x| half_space.normal.dot(x) > half_space.offset)
        .count();
    hits as f64 / s.ncols() as f64
}

/// Sample mean and unbiased covariance of the columns.
fn sample_moments(samples: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, m) = samples.shape();
    if m == 0 {
        return (DVector::zeros(n), DMatrix::zeros(n, n));
    }
    let mean = samples.column_mean();
    let centered = samples - &mean * DMatrix::from_element(1, m, 1.0);
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    let cov = &centered * centered.transpose() / denom;
    (mean, (&cov + cov.transpose()) * 0.5)
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

struct Trial {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    path: Option<DMatrix<f64>>,
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn collect(
    trials: usize,
    runs: Vec<Option<Trial>>,
    nx: usize,
    nu: usize,
    steps: usize,
) -> Result<SimulationResult> {
    let kept: Vec<Trial> = runs.into_iter().flatten().collect();
    let divergent = trials - kept.len();
    if divergent as f64 > MAX_DIVERGENT_FRACTION * trials as f64 {
        return Err(Error::SimulationDiverged { divergent, trials });
    }
    let m = kept.len();
    let samples: Vec<DMatrix<f64>> = (0..=steps)
        .map(|k| DMatrix::from_fn(nx, m, |r, c| kept[c].states[k][r]))
        .collect();
    let control_samples: Vec<DMatrix<f64>> = (0..steps)
        .map(|k| DMatrix::from_fn(nu, m, |r, c| kept[c].controls[k][r]))
        .collect();
    let (means, covariances) = samples.iter().map(sample_moments).unzip();
    let paths = if kept.iter().all(|t| t.path.is_some()) && m > 0 {
        Some(kept.into_iter().map(|t| t.path.unwrap()).collect())
    } else {
        None
    };
    Ok(SimulationResult {
        means,
        covariances,
        samples,
        control_samples,
        paths,
        trials,
        divergent,
    })
}

fn check_policy(policy: &Policy, steps: &[LinearizedStep], nx: usize, nu: usize) -> Result<()> {
    let n = policy.steps();
    if n == 0 || steps.len() != n {
        return Err(Error::InvalidArgument(format!(
            "policy has {n} steps but {} discretized intervals were given",
            steps.len()
        )));
    }
    if policy.feedforward.iter().any(|v| v.len() != nu)
        || policy.gains.iter().any(|k| k.shape() != (nu, nx))
    {
        return Err(Error::InvalidArgument(
            "policy dimensions do not match the model".into(),
        ));
    }
    if steps.iter().any(|s| s.a.shape() != (nx, nx)) {
        return Err(Error::InvalidArgument(
            "discretized dynamics do not match the model".into(),
        ));
    }
    Ok(())
}

/// Simulates the stochastic plant under `u_k = v_k + K_k y_k`.
///
/// The controller state starts at `y₀ = x₀ − x̄₀` and is advanced by
/// `y_{k+1} = A_k y_k + (x_{k+1} − m_{k+1})`, where `m_{k+1}` is the noise-free
/// prediction from `x_k` under the same control.
pub fn simulate_closed_loop<M: Model + ?Sized>(
    model: &M,
    policy: &Policy,
    steps: &[LinearizedStep],
    x0_mean: &DVector<f64>,
    p_x0: &DMatrix<f64>,
    sigma: f64,
    opts: &SimOptions,
) -> Result<SimulationResult> {
    opts.validate()?;
    let (nx, nu, nw) = (model.state_dim(), model.control_dim(), model.noise_dim());
    check_policy(policy, steps, nx, nu)?;
    if x0_mean.len() != nx || p_x0.shape() != (nx, nx) {
        return Err(Error::InvalidArgument(
            "initial distribution does not match the model".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let n = steps.len();
    let l0 = psd_sqrt(p_x0)?;
    let dtau = 1.0 / n as f64;
    let h = dtau / opts.substeps as f64;
    let noise_scale = (sigma * h).sqrt();

    let run = |trial: usize| -> Option<Trial> {
        let mut rng = trial_rng(opts.seed, trial);
        let mut x = x0_mean + &l0 * standard_normal(&mut rng, nx);
        let mut y = &x - x0_mean;
        let mut states = Vec::with_capacity(n + 1);
        let mut controls = Vec::with_capacity(n);
        let mut path = opts.record_full_paths.then(|| {
            let mut p = DMatrix::zeros(nx, n * opts.substeps + 1);
            p.set_column(0, &x);
            p
        });
        states.push(x.clone());
        for k in 0..n {
            let u = &policy.feedforward[k] + &policy.gains[k] * &y;
            let mut m = x.clone();
            for s in 0..opts.substeps {
                let t = sigma * (k as f64 * dtau + s as f64 * h);
                let dw = standard_normal(&mut rng, nw) * noise_scale;
                x = &x + model.drift(&x, &u, t) * (sigma * h) + model.diffusion(t) * dw;
                m = &m + model.drift(&m, &u, t) * (sigma * h);
                if let Some(p) = path.as_mut() {
                    p.set_column(k * opts.substeps + s + 1, &x);
                }
            }
            if !finite(&x) || !finite(&m) {
                return None;
            }
            y = &steps[k].a * y + (&x - m);
            states.push(x.clone());
            controls.push(u);
        }
        Some(Trial {
            states,
            controls,
            path,
        })
    };
    let runs: Vec<Option<Trial>> = (0..opts.trials).into_par_iter().map(run).collect();
    collect(opts.trials, runs, nx, nu, n)
}

/// Simulates `x_{k+1} = A_k x_k + B_k u_k + r_k + √σ G_k w_k` exactly, with a
/// causal policy `u = V + K y` over the stacked noise process
/// `y_{k+1} = A_k y_k + √σ G_k w_k`, `y₀ = x₀ − x̄₀`.
///
/// `gains` is `N n_u × (N+1) n_x`; blocks above the diagonal must be zero.
pub fn simulate_discrete_linear(
    steps: &[LinearizedStep],
    feedforward: &DVector<f64>,
    gains: &DMatrix<f64>,
    x0_mean: &DVector<f64>,
    p_x0: &DMatrix<f64>,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<SimulationResult> {
    let n = steps.len();
    if n == 0 || trials == 0 {
        return Err(Error::InvalidArgument(
            "need at least one step and one trial".into(),
        ));
    }
    let (nx, nu) = steps[0].b.shape();
    if feedforward.len() != n * nu || gains.shape() != (n * nu, (n + 1) * nx) {
        return Err(Error::InvalidArgument(
            "stacked policy has the wrong shape".into(),
        ));
    }
    for k in 0..n {
        if gains
            .view((k * nu, (k + 1) * nx), (nu, (n - k) * nx))
            .iter()
            .any(|v| *v != 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "gain row {k} is not causal"
            )));
        }
    }
    if x0_mean.len() != nx || p_x0.shape() != (nx, nx) {
        return Err(Error::InvalidArgument(
            "initial distribution does not match the dynamics".into(),
        ));
    }
    let l0 = psd_sqrt(p_x0)?;
    let root_sigma = sigma.sqrt();

    let run = |trial: usize| -> Option<Trial> {
        let mut rng = trial_rng(seed, trial);
        let mut x = x0_mean + &l0 * standard_normal(&mut rng, nx);
        let mut ys = DVector::zeros((n + 1) * nx);
        ys.rows_mut(0, nx).copy_from(&(&x - x0_mean));
        let mut states = vec![x.clone()];
        let mut controls = Vec::with_capacity(n);
        for (k, st) in steps.iter().enumerate() {
            let u = feedforward.rows(k * nu, nu) + gains.rows(k * nu, nu) * &ys;
            let w = standard_normal(&mut rng, st.g.ncols()) * root_sigma;
            let gw = &st.g * w;
            x = &st.a * &x + &st.b * &u + &st.r + &gw;
            let y_next = &st.a * ys.rows(k * nx, nx) + gw;
            ys.rows_mut((k + 1) * nx, nx).copy_from(&y_next);
            if !finite(&x) {
                return None;
            }
            states.push(x.clone());
            controls.push(u);
        }
        Some(Trial {
            states,
            controls,
            path: None,
        })
    };
    let runs: Vec<Option<Trial>> = (0..trials).into_par_iter().map(run).collect();
    collect(trials, runs, nx, nu, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Major then minor semi-axis.
    pub semi_axes: [f64; 2],
    /// Angle of the major axis from the first coordinate, radians.
    pub rotation: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let a = (c * dx + s * dy) / self.semi_axes[0];
        let b = (-s * dx + c * dy) / self.semi_axes[1];
        a * a + b * b <= 1.0
    }

    pub fn boundary(&self, points: usize) -> Vec<[f64; 2]> {
        let (s, c) = self.rotation.sin_cos();
        (0..points)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / points as f64;
                let (a, b) = (self.semi_axes[0] * th.cos(), self.semi_axes[1] * th.sin());
                [
                    self.center[0] + c * a - s * b,
                    self.center[1] + s * a + c * b,
                ]
            })
            .collect()
    }
}

/// Level set of a planar Gaussian containing probability `level`.
pub fn confidence_ellipse(mean: [f64; 2], cov: [[f64; 2]; 2], level: f64) -> Result<Ellipse> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let off = 0.5 * (cov[0][1] + cov[1][0]);
    let m = nalgebra::Matrix2::new(cov[0][0], off, off, cov[1][1]);
    let eig = m.symmetric_eigen();
    let (i_max, i_min) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    if eig.eigenvalues[i_min] < -1e-12 * eig.eigenvalues[i_max].abs().max(1.0) {
        return Err(Error::NotPsd {
            min_eigenvalue: eig.eigenvalues[i_min],
        });
    }
    let chi2 = -2.0 * (1.0 - level).ln();
    let axis = eig.eigenvectors.column(i_max);
    Ok(Ellipse {
        center: mean,
        semi_axes: [
            (chi2 * eig.eigenvalues[i_max].max(0.0)).sqrt(),
            (chi2 * eig.eigenvalues[i_min].max(0.0)).sqrt(),
        ],
        rotation: axis[1].atan2(axis[0]),
    })
}
