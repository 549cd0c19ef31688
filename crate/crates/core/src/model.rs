//! Continuous-time stochastic models `dx = f(x, u, t) dt + G(t) dw`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A nonlinear drift with additive, time-varying diffusion.
///
/// Jacobians default to central finite differences; implementors with
/// closed forms should override them.
pub trait Model: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DVector<f64>;

    /// `G(t)`, of shape `n_x × n_w`.
    fn diffusion(&self, t: f64) -> DMatrix<f64>;

    fn jacobian_x(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DMatrix<f64> {
        finite_difference_x(self, x, u, t)
    }

    fn jacobian_u(&self, x: &DVector<f64>, u: &DVector<f64>, t: f64) -> DMatrix<f64> {
        finite_difference_u(self, x, u, t)
    }
}

pub(crate) fn check_dims<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<()> {
    if x.len() != model.state_dim() || u.len() != model.control_dim() {
        return Err(Error::InvalidArgument(format!(
            "model expects x ∈ R^{} and u ∈ R^{}, got {} and {}",
            model.state_dim(),
            model.control_dim(),
            x.len(),
            u.len()
        )));
    }
    Ok(())
}

/// `f(x, u, t)` with dimension checks.
pub fn drift<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    check_dims(model, x, u)?;
    Ok(model.drift(x, u, t))
}

/// `∂f/∂x` with dimension checks.
pub fn jacobian_x<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    check_dims(model, x, u)?;
    Ok(model.jacobian_x(x, u, t))
}

/// `∂f/∂u` with dimension checks.
pub fn jacobian_u<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    check_dims(model, x, u)?;
    Ok(model.jacobian_u(x, u, t))
}

fn fd_step(v: &DVector<f64>) -> f64 {
    1e-5 * (1.0 + v.amax())
}

/// Central differences of the drift with respect to `x`.
pub fn finite_difference_x<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> DMatrix<f64> {
    let h = fd_step(x);
    let mut jac = DMatrix::zeros(model.state_dim(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = model.drift(&xp, u, t);
        xp[j] = x[j] - h;
        let fm = model.drift(&xp, u, t);
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Central differences of the drift with respect to `u`.
pub fn finite_difference_u<M: Model + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    t: f64,
) -> DMatrix<f64> {
    let h = fd_step(x);
    let mut jac = DMatrix::zeros(model.state_dim(), u.len());
    let mut up = u.clone();
    for j in 0..u.len() {
        up[j] = u[j] + h;
        let fp = model.drift(x, &up, t);
        up[j] = u[j] - h;
        let fm = model.drift(x, &up, t);
        up[j] = u[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Planar double integrator with quadratic drag.
///
/// State `(ξ₁, ξ₂, v₁, v₂)`, control is acceleration, and the drift is
/// `[v; u − c_d‖v‖v]`. Noise enters the velocity rows as `γ·I₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragDoubleIntegrator {
    drag: f64,
    noise: f64,
}

impl DragDoubleIntegrator {
    pub fn new(drag: f64, noise: f64) -> Result<Self> {
        if !(drag >= 0.0 && drag.is_finite()) || !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "drag coefficient and noise scale must be finite and nonnegative, got {drag} and {noise}"
            )));
        }
        Ok(Self { drag, noise })
    }

    pub fn drag(&self) -> f64 {
        self.drag
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }
}

impl Model for DragDoubleIntegrator {
    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DVector<f64> {
        let (v1, v2) = (x[2], x[3]);
        let speed = v1.hypot(v2);
        DVector::from_vec(vec![
            v1,
            v2,
            u[0] - self.drag * speed * v1,
            u[1] - self.drag * speed * v2,
        ])
    }

    fn diffusion(&self, _t: f64) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(4, 2);
        g[(2, 0)] = self.noise;
        g[(3, 1)] = self.noise;
        g
    }

    fn jacobian_x(&self, x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(4, 4);
        jac[(0, 2)] = 1.0;
        jac[(1, 3)] = 1.0;
        let (v1, v2) = (x[2], x[3]);
        let speed = v1.hypot(v2);
        // −c_d (v vᵀ/‖v‖ + ‖v‖ I), which tends to zero as v → 0
        if speed > 0.0 {
            let c = self.drag;
            jac[(2, 2)] = -c * (v1 * v1 / speed + speed);
            jac[(2, 3)] = -c * v1 * v2 / speed;
            jac[(3, 2)] = -c * v1 * v2 / speed;
            jac[(3, 3)] = -c * (v2 * v2 / speed + speed);
        }
        jac
    }

    fn jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(4, 2);
        jac[(2, 0)] = 1.0;
        jac[(3, 1)] = 1.0;
        jac
    }
}

/// Time-invariant linear model `f = A x + B u`, diffusion `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || g.nrows() != n || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "linear model needs square A with matching B and G rows, got A {}×{}, B {}×{}, G {}×{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                g.nrows(),
                g.ncols()
            )));
        }
        Ok(Self { a, b, g })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
}

impl Model for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }

    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, _t: f64) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn diffusion(&self, _t: f64) -> DMatrix<f64> {
        self.g.clone()
    }

    fn jacobian_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        self.a.clone()
    }

    fn jacobian_u(&self, _x: &DVector<f64>, _u: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        self.b.clone()
    }
}
