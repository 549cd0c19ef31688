//! Time normalization, linearization about a reference, and discretization.
//!
//! Normalized time `τ ∈ [0, 1]` maps to physical time `t = στ`, so the
//! dynamics become `dx = σ f dτ + √σ G dw_τ`. The grid is uniform with
//! `τ_k = k/N`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::model::Model;
use crate::{Error, Result};

/// Nominal states `x̂_0..x̂_N` and zero-order-hold controls `û_0..û_{N−1}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReferenceTrajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub sigma: f64,
}

impl ReferenceTrajectory {
    pub fn new(states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>, sigma: f64) -> Result<Self> {
        let n = controls.len();
        if n == 0 || states.len() != n + 1 {
            return Err(Error::InvalidArgument(format!(
                "reference needs N ≥ 1 controls and N+1 states, got {} and {}",
                controls.len(),
                states.len()
            )));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let nx = states[0].len();
        let nu = controls[0].len();
        if states.iter().any(|s| s.len() != nx) || controls.iter().any(|c| c.len() != nu) {
            return Err(Error::InvalidArgument(
                "reference vectors have inconsistent lengths".into(),
            ));
        }
        Ok(Self {
            states,
            controls,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn dtau(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    fn interval(&self, tau: f64) -> usize {
        ((tau * self.steps() as f64).floor() as usize).min(self.steps() - 1)
    }

    /// Linear interpolation of the nominal state.
    pub fn state_at(&self, tau: f64) -> DVector<f64> {
        let k = self.interval(tau);
        let s = tau * self.steps() as f64 - k as f64;
        &self.states[k] * (1.0 - s) + &self.states[k + 1] * s
    }

    /// Zero-order-hold nominal control.
    pub fn control_at(&self, tau: f64) -> &DVector<f64> {
        &self.controls[self.interval(tau)]
    }
}

/// `A_τ`, `B_τ`, `r_τ` of `dx/dτ ≈ A_τ x + B_τ u + r_τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLinearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r: DVector<f64>,
}

/// One step of `x_{k+1} = A x_k + B u_k + r + √σ G w_k`, `w_k ~ N(0, I)`.
///
/// `sigma_noise = G Gᵀ` is the per-step noise covariance before the
/// dilation factor `σ`, which is applied once during block assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r: DVector<f64>,
    pub g: DMatrix<f64>,
    pub sigma_noise: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// State-transition integrals by RK4 with the given substeps per interval.
    Exact {
        substeps: usize,
    },
    FirstOrder,
}

fn linearize_at<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    tau: f64,
    sigma: f64,
) -> (DVector<f64>, ContinuousLinearization) {
    let t = sigma * tau;
    let f = model.drift(x, u, t) * sigma;
    let a = model.jacobian_x(x, u, t) * sigma;
    let b = model.jacobian_u(x, u, t) * sigma;
    let r = &f - &a * x - &b * u;
    (f, ContinuousLinearization { a, b, r })
}

/// Linearizes the time-normalized drift at the reference point for `τ`.
pub fn linearize<M: Model + ?Sized>(
    model: &M,
    reference: &ReferenceTrajectory,
    tau: f64,
) -> Result<ContinuousLinearization> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau = {tau} outside [0, 1]"
        )));
    }
    let x = reference.state_at(tau);
    let u = reference.control_at(tau);
    crate::model::check_dims(model, &x, u)?;
    Ok(linearize_at(model, &x, u, tau, reference.sigma).1)
}

/// One classical RK4 step of `dx/dτ = σ f(x, u, στ)`.
pub(crate) fn rk4_mean_step<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    tau: f64,
    h: f64,
    sigma: f64,
) -> DVector<f64> {
    let f = |x: &DVector<f64>, tau: f64| model.drift(x, u, sigma * tau) * sigma;
    let k1 = f(x, tau);
    let k2 = f(&(x + &k1 * (0.5 * h)), tau + 0.5 * h);
    let k3 = f(&(x + &k2 * (0.5 * h)), tau + 0.5 * h);
    let k4 = f(&(x + &k3 * h), tau + h);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// State of the joint variational ODE over one interval.
#[derive(Clone)]
struct Joint {
    x: DVector<f64>,
    phi: DMatrix<f64>,
    b: DMatrix<f64>,
    r: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Joint {
    fn axpy(&self, h: f64, d: &Joint) -> Joint {
        Joint {
            x: &self.x + &d.x * h,
            phi: &self.phi + &d.phi * h,
            b: &self.b + &d.b * h,
            r: &self.r + &d.r * h,
            cov: &self.cov + &d.cov * h,
        }
    }

    fn is_finite(&self) -> bool {
        let all = |s: &[f64]| s.iter().all(|v| v.is_finite());
        all(self.x.as_slice())
            && all(self.phi.as_slice())
            && all(self.b.as_slice())
            && all(self.r.as_slice())
            && all(self.cov.as_slice())
    }
}

/// Exact zero-order-hold discretization of interval `k`.
///
/// Integrates, from `x̂_k` along the nonlinear reference path,
/// `dΦ/dτ = AΦ`, `dB/dτ = AB + B_τ`, `dr/dτ = Ar + r_τ` and
/// `dΣ/dτ = AΣ + ΣAᵀ + GGᵀ` with RK4.
pub fn discretize_exact<M: Model + ?Sized>(
    model: &M,
    reference: &ReferenceTrajectory,
    k: usize,
    substeps: usize,
) -> Result<LinearizedStep> {
    check_step(model, reference, k)?;
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    let sigma = reference.sigma;
    let u = &reference.controls[k];
    let n = model.state_dim();
    let dtau = reference.dtau();
    let h = dtau / substeps as f64;

    let deriv = |z: &Joint, tau: f64| -> Joint {
        let (f, lin) = linearize_at(model, &z.x, u, tau, sigma);
        let g = model.diffusion(sigma * tau);
        let a = &lin.a;
        Joint {
            x: f,
            phi: a * &z.phi,
            b: a * &z.b + &lin.b,
            r: a * &z.r + &lin.r,
            cov: a * &z.cov + &z.cov * a.transpose() + &g * g.transpose(),
        }
    };

    let mut z = Joint {
        x: reference.states[k].clone(),
        phi: DMatrix::identity(n, n),
        b: DMatrix::zeros(n, model.control_dim()),
        r: DVector::zeros(n),
        cov: DMatrix::zeros(n, n),
    };
    let tau0 = k as f64 * dtau;
    for s in 0..substeps {
        let tau = tau0 + s as f64 * h;
        let k1 = deriv(&z, tau);
        let k2 = deriv(&z.axpy(0.5 * h, &k1), tau + 0.5 * h);
        let k3 = deriv(&z.axpy(0.5 * h, &k2), tau + 0.5 * h);
        let k4 = deriv(&z.axpy(h, &k3), tau + h);
        let sum = Joint {
            x: k1.x + k2.x * 2.0 + k3.x * 2.0 + k4.x,
            phi: k1.phi + k2.phi * 2.0 + k3.phi * 2.0 + k4.phi,
            b: k1.b + k2.b * 2.0 + k3.b * 2.0 + k4.b,
            r: k1.r + k2.r * 2.0 + k3.r * 2.0 + k4.r,
            cov: k1.cov + k2.cov * 2.0 + k3.cov * 2.0 + k4.cov,
        };
        z = z.axpy(h / 6.0, &sum);
        if !z.is_finite() {
            return Err(Error::NumericalFailure { step: k });
        }
    }
    let cov = (&z.cov + z.cov.transpose()) * 0.5;
    let g = psd_sqrt(&cov).map_err(|_| Error::NumericalFailure { step: k })?;
    Ok(LinearizedStep {
        a: z.phi,
        b: z.b,
        r: z.r,
        g,
        sigma_noise: cov,
    })
}

/// First-order (Euler) discretization of interval `k` about `(x̂_k, û_k)`.
pub fn discretize_first_order<M: Model + ?Sized>(
    model: &M,
    reference: &ReferenceTrajectory,
    k: usize,
) -> Result<LinearizedStep> {
    check_step(model, reference, k)?;
    let sigma = reference.sigma;
    let dtau = reference.dtau();
    let tau = k as f64 * dtau;
    let n = model.state_dim();
    let (_, lin) = linearize_at(
        model,
        &reference.states[k],
        &reference.controls[k],
        tau,
        sigma,
    );
    let g_tau = model.diffusion(sigma * tau);
    let cov = &g_tau * g_tau.transpose() * dtau;
    let g = if g_tau.ncols() <= n {
        let mut g = DMatrix::zeros(n, n);
        g.columns_mut(0, g_tau.ncols())
            .copy_from(&(&g_tau * dtau.sqrt()));
        g
    } else {
        psd_sqrt(&cov)?
    };
    let step = LinearizedStep {
        a: DMatrix::identity(n, n) + lin.a * dtau,
        b: lin.b * dtau,
        r: lin.r * dtau,
        g,
        sigma_noise: cov,
    };
    let finite = step
        .a
        .iter()
        .chain(step.b.iter())
        .chain(step.r.iter())
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NumericalFailure { step: k });
    }
    Ok(step)
}

fn check_step<M: Model + ?Sized>(
    model: &M,
    reference: &ReferenceTrajectory,
    k: usize,
) -> Result<()> {
    if k >= reference.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {k} out of range for a horizon of {}",
            reference.steps()
        )));
    }
    if reference.states[0].len() != model.state_dim()
        || reference.controls[0].len() != model.control_dim()
    {
        return Err(Error::InvalidArgument(format!(
            "reference dimensions ({}, {}) do not match the model ({}, {})",
            reference.states[0].len(),
            reference.controls[0].len(),
            model.state_dim(),
            model.control_dim()
        )));
    }
    Ok(())
}

/// Discretizes every interval, in parallel.
pub fn discretize<M: Model + ?Sized>(
    model: &M,
    reference: &ReferenceTrajectory,
    scheme: Scheme,
) -> Result<Vec<LinearizedStep>> {
    (0..reference.steps())
        .into_par_iter()
        .map(|k| match scheme {
            Scheme::Exact { substeps } => discretize_exact(model, reference, k, substeps),
            Scheme::FirstOrder => discretize_first_order(model, reference, k),
        })
        .collect()
}

/// Symmetric PSD square root by spectral decomposition.
///
/// Eigenvalues slightly below zero (no lower than `−1e-8‖S‖₂`) are clamped.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::InvalidArgument(format!(
            "psd_sqrt of a non-square {}×{} matrix",
            s.nrows(),
            s.ncols()
        )));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let norm = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -1e-8 * norm || !min.is_finite() {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&root);
    let r = &scaled * eig.eigenvectors.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DragDoubleIntegrator, LinearModel};

    fn constant_reference(nx: usize, nu: usize, n: usize, sigma: f64) -> ReferenceTrajectory {
        ReferenceTrajectory::new(
            vec![DVector::zeros(nx); n + 1],
            vec![DVector::zeros(nu); n],
            sigma,
        )
        .unwrap()
    }

    #[test]
    fn reference_validation() {
        assert!(ReferenceTrajectory::new(vec![DVector::zeros(2)], vec![], 1.0).is_err());
        assert!(
            ReferenceTrajectory::new(vec![DVector::zeros(2); 2], vec![DVector::zeros(1)], 0.0)
                .is_err()
        );
    }

    #[test]
    fn linear_model_has_zero_residual() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let m = LinearModel::new(a.clone(), b.clone(), DMatrix::zeros(2, 1)).unwrap();
        let r = ReferenceTrajectory::new(
            vec![
                DVector::from_vec(vec![1.0, 2.0]),
                DVector::from_vec(vec![-3.0, 0.5]),
            ],
            vec![DVector::from_vec(vec![0.7])],
            3.0,
        )
        .unwrap();
        let lin = linearize(&m, &r, 0.4).unwrap();
        assert_eq!(lin.r, DVector::zeros(2));
        assert_eq!(lin.a, a * 3.0);
        assert_eq!(lin.b, b * 3.0);
    }

    #[test]
    fn drag_linearization_scales_by_sigma() {
        let m = DragDoubleIntegrator::new(0.005, 0.01).unwrap();
        let r = ReferenceTrajectory::new(
            vec![DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0]); 2],
            vec![DVector::zeros(2)],
            15.0,
        )
        .unwrap();
        let lin = linearize(&m, &r, 0.0).unwrap();
        assert!((lin.a[(2, 2)] + 15.0 * 0.02).abs() < 1e-14);
        assert!((lin.a[(3, 3)] + 15.0 * 0.01).abs() < 1e-14);
        assert!(linearize(&m, &r, 1.5).is_err());
    }

    #[test]
    fn constant_integrand_step() {
        // A_τ ≡ 0: A_k = I, B_k = B dτ, Σ_k = G₀G₀ᵀ dτ (σ applied downstream)
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let g0 = DMatrix::from_row_slice(2, 1, &[0.5, -1.0]);
        let m = LinearModel::new(DMatrix::zeros(2, 2), b.clone(), g0.clone()).unwrap();
        let n = 4;
        let r = constant_reference(2, 1, n, 1.0);
        let step = discretize_exact(&m, &r, 2, 10).unwrap();
        assert!((step.a - DMatrix::<f64>::identity(2, 2)).amax() < 1e-14);
        assert!((step.b - &b / n as f64).amax() < 1e-14);
        let expected = &g0 * g0.transpose() / n as f64;
        assert!((&step.sigma_noise - &expected).amax() < 1e-14);
        assert!(
            (&step.g * step.g.transpose() - &expected).norm() <= 1e-10 * (1.0 + expected.norm())
        );
    }

    #[test]
    fn first_order_definitions() {
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -2.0, -0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g0 = DMatrix::from_row_slice(2, 1, &[0.0, 0.2]);
        let m = LinearModel::new(a.clone(), b.clone(), g0.clone()).unwrap();
        let r = constant_reference(2, 1, 5, 2.0);
        let step = discretize_first_order(&m, &r, 1).unwrap();
        let dt = 0.2;
        assert!((step.a - (DMatrix::identity(2, 2) + &a * 2.0 * dt)).amax() < 1e-15);
        assert!((step.b - &b * 2.0 * dt).amax() < 1e-15);
        assert_eq!(step.g.shape(), (2, 2));
        assert!((&step.g * step.g.transpose() - &step.sigma_noise).amax() < 1e-15);
    }

    #[test]
    fn psd_sqrt_cases() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((psd_sqrt(&i).unwrap() - &i).amax() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((psd_sqrt(&d).unwrap() - expected).amax() < 1e-14);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        assert!(matches!(psd_sqrt(&bad), Err(Error::NotPsd { .. })));
        // tiny negative eigenvalue is clamped
        let near = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-12]));
        assert!(psd_sqrt(&near).unwrap()[(1, 1)] == 0.0);
    }
}
