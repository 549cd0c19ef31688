//! The covariance-steering subproblem and its lowering to a conic program.
//!
//! Decision variables are the stacked feedforward `V`, the per-step gains
//! `K_k` and the terminal slack `η`, in that order (see [`CoreLayout`]).

mod build;
mod lower;
pub mod normal;

pub use build::{
    build_chance_constraints, build_cost, build_subproblem, build_terminal_cov,
    build_terminal_mean, build_trust_region, evaluate_cost, spread_map, AffineMap, AffineScalar,
    ChanceRow, Constraint, CoreLayout, Objective, ProgramParts, Space, SpreadKey,
    SubproblemOptions, TerminalMode,
};
pub use lower::{lower, lower_with, LoweredProgram, ObjectiveForm};
pub use normal::{inverse_normal_cdf, normal_cdf};

use nalgebra::{DMatrix, DVector};

use crate::blocks::{stack_gains, stack_vectors, CostWeights};
use crate::{Error, Result};

/// `{x : aᵀx ≤ α}`, to hold with probability at least `1 − risk`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub normal: DVector<f64>,
    pub offset: f64,
    pub risk: f64,
}

impl HalfSpace {
    pub fn new(normal: DVector<f64>, offset: f64, risk: f64) -> Result<Self> {
        let h = Self {
            normal,
            offset,
            risk,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.normal.iter().all(|v| v.is_finite())
            || self.normal.norm() == 0.0
            || !self.offset.is_finite()
        {
            return Err(Error::InvalidArgument(
                "half-space normal must be finite and nonzero".into(),
            ));
        }
        if !(self.risk > 0.0 && self.risk < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "half-space risk {} outside (0, 0.5)",
                self.risk
            )));
        }
        Ok(())
    }

    /// Whether `x` violates the half-space.
    pub fn is_violated(&self, x: &DVector<f64>) -> bool {
        self.normal.dot(x) > self.offset
    }
}

/// Splits a total risk uniformly over `count` half-spaces.
pub fn allocate_risk(p_total: f64, count: usize) -> Result<Vec<f64>> {
    if !(p_total > 0.0 && p_total < 0.5) || count == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot split risk {p_total} over {count} rows"
        )));
    }
    Ok(vec![p_total / count as f64; count])
}

/// A polytope `{x : a_mᵀx ≤ α_m}` with a joint violation budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ChanceRegion {
    pub normals: Vec<DVector<f64>>,
    pub offsets: Vec<f64>,
    pub risk: f64,
}

impl ChanceRegion {
    /// Half-spaces with the budget split uniformly.
    pub fn half_spaces(&self) -> Result<Vec<HalfSpace>> {
        if self.normals.len() != self.offsets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} normals but {} offsets",
                self.normals.len(),
                self.offsets.len()
            )));
        }
        let risks = allocate_risk(self.risk, self.normals.len())?;
        self.normals
            .iter()
            .zip(&self.offsets)
            .zip(risks)
            .map(|((a, &alpha), p)| HalfSpace::new(a.clone(), alpha, p))
            .collect()
    }
}

/// `ℓ(ū, x̄) = ūᵀW_uū + (x̄ − x_ref)ᵀW_x(x̄ − x_ref) + q_uᵀū + q_xᵀx̄`,
/// summed over steps `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCost {
    pub control_weight: DMatrix<f64>,
    pub state_weight: DMatrix<f64>,
    pub state_reference: DVector<f64>,
    pub control_linear: DVector<f64>,
    pub state_linear: DVector<f64>,
}

impl MeanCost {
    /// `weight·‖ū‖²`.
    pub fn control_energy(weight: f64, nx: usize, nu: usize) -> Self {
        Self {
            control_weight: DMatrix::identity(nu, nu) * weight,
            state_weight: DMatrix::zeros(nx, nx),
            state_reference: DVector::zeros(nx),
            control_linear: DVector::zeros(nu),
            state_linear: DVector::zeros(nx),
        }
    }

    pub fn evaluate(&self, u: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let dx = x - &self.state_reference;
        u.dot(&(&self.control_weight * u))
            + dx.dot(&(&self.state_weight * &dx))
            + self.control_linear.dot(u)
            + self.state_linear.dot(x)
    }

    fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        let shapes = self.control_weight.shape() == (nu, nu)
            && self.state_weight.shape() == (nx, nx)
            && self.state_reference.len() == nx
            && self.control_linear.len() == nu
            && self.state_linear.len() == nx;
        if !shapes {
            return Err(Error::InvalidArgument(
                "mean cost dimensions do not match the model".into(),
            ));
        }
        for (name, w) in [
            ("control", &self.control_weight),
            ("state", &self.state_weight),
        ] {
            let sym = (w + w.transpose()) * 0.5;
            if (w - &sym).amax() > 1e-12 * (1.0 + w.amax())
                || sym.symmetric_eigenvalues().min() < -1e-12 * w.amax()
            {
                return Err(Error::InvalidArgument(format!(
                    "mean cost {name} weight must be symmetric positive semidefinite"
                )));
            }
        }
        Ok(())
    }
}

/// Componentwise stochastic trust region around the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegion {
    pub state_radius: f64,
    pub control_radius: f64,
    pub state_risk: f64,
    pub control_risk: f64,
}

impl TrustRegion {
    pub fn widened(&self, factor: f64) -> Self {
        Self {
            state_radius: self.state_radius * factor,
            control_radius: self.control_radius * factor,
            ..*self
        }
    }
}

/// Geometric schedule for loosening chance-constraint offsets early on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relaxation {
    pub iterations: usize,
    pub factor: f64,
}

impl Default for Relaxation {
    fn default() -> Self {
        Self {
            iterations: 5,
            factor: 0.5,
        }
    }
}

/// Everything that defines one steering problem, independent of the
/// reference it is linearized about.
#[derive(Debug, Clone, PartialEq)]
pub struct CsProblemSpec {
    pub steps: usize,
    pub sigma: f64,
    pub x0_mean: DVector<f64>,
    pub p_x0: DMatrix<f64>,
    pub xf_mean: DVector<f64>,
    pub p_xf: DMatrix<f64>,
    /// Half-spaces on `x_k`, `k = 0..=N`.
    pub state_constraints: Vec<Vec<HalfSpace>>,
    /// Half-spaces on `u_k`, `k = 0..N`.
    pub control_constraints: Vec<Vec<HalfSpace>>,
    pub state_risk_budget: Vec<f64>,
    pub control_risk_budget: Vec<f64>,
    pub mean_cost: MeanCost,
    pub weights: CostWeights,
    /// `w_xf`, the price of the terminal-mean slack `η`.
    pub terminal_weight: f64,
    pub trust_region: Option<TrustRegion>,
    pub relaxation: Relaxation,
}

impl CsProblemSpec {
    /// A problem without chance constraints or trust region.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sigma: f64,
        x0_mean: DVector<f64>,
        p_x0: DMatrix<f64>,
        xf_mean: DVector<f64>,
        p_xf: DMatrix<f64>,
        mean_cost: MeanCost,
        weights: CostWeights,
        terminal_weight: f64,
    ) -> Result<Self> {
        let steps = weights.qu.len();
        let spec = Self {
            steps,
            sigma,
            x0_mean,
            p_x0,
            xf_mean,
            p_xf,
            state_constraints: vec![Vec::new(); steps + 1],
            control_constraints: vec![Vec::new(); steps],
            state_risk_budget: vec![0.0; steps + 1],
            control_risk_budget: vec![0.0; steps],
            mean_cost,
            weights,
            terminal_weight,
            trust_region: None,
            relaxation: Relaxation::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn nx(&self) -> usize {
        self.x0_mean.len()
    }

    pub fn nu(&self) -> usize {
        self.mean_cost.control_linear.len()
    }

    /// Adds a state chance region at each listed step.
    pub fn add_state_region(&mut self, steps: &[usize], region: &ChanceRegion) -> Result<()> {
        let rows = region.half_spaces()?;
        for &k in steps {
            if k > self.steps {
                return Err(Error::InvalidArgument(format!(
                    "state step {k} beyond horizon {}",
                    self.steps
                )));
            }
            self.state_constraints[k].extend(rows.iter().cloned());
            self.state_risk_budget[k] += region.risk;
        }
        self.validate()
    }

    /// Adds a control chance region at each listed step.
    pub fn add_control_region(&mut self, steps: &[usize], region: &ChanceRegion) -> Result<()> {
        let rows = region.half_spaces()?;
        for &k in steps {
            if k >= self.steps {
                return Err(Error::InvalidArgument(format!(
                    "control step {k} beyond horizon {}",
                    self.steps
                )));
            }
            self.control_constraints[k].extend(rows.iter().cloned());
            self.control_risk_budget[k] += region.risk;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, nx) = (self.steps, self.x0_mean.len());
        let nu = self.mean_cost.control_linear.len();
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if n == 0 || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!(
                "need N ≥ 1 and σ > 0, got N = {n}, σ = {}",
                self.sigma
            ));
        }
        if self.p_x0.shape() != (nx, nx)
            || self.xf_mean.len() != nx
            || self.p_xf.shape() != (nx, nx)
        {
            return bad("boundary conditions have inconsistent dimensions".into());
        }
        if crate::lindisc::psd_sqrt(&self.p_x0).is_err() {
            return bad("initial covariance is not positive semidefinite".into());
        }
        let sym = (&self.p_xf + self.p_xf.transpose()) * 0.5;
        if (&self.p_xf - &sym).amax() > 1e-12 * (1.0 + self.p_xf.amax())
            || sym.symmetric_eigenvalues().min() <= 0.0
        {
            return bad("terminal covariance must be symmetric positive definite".into());
        }
        self.mean_cost.validate(nx, nu)?;
        if self.weights.qx.len() != n + 1 || self.weights.qu.len() != n {
            return bad("cost weights do not match the horizon".into());
        }
        if self.weights.qx[0].nrows() != nx || self.weights.qu[0].nrows() != nu {
            return bad("cost weights do not match the state and control dimensions".into());
        }
        if !(self.terminal_weight > 0.0 && self.terminal_weight.is_finite()) {
            return bad(format!(
                "terminal weight must be positive, got {}",
                self.terminal_weight
            ));
        }
        let check_rows = |rows: &[Vec<HalfSpace>],
                          budget: &[f64],
                          len: usize,
                          dim: usize,
                          what: &str|
         -> Result<()> {
            if rows.len() != len || budget.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "{what} constraints need {len} step entries"
                )));
            }
            for (k, (hs, &b)) in rows.iter().zip(budget).enumerate() {
                let mut total = 0.0;
                for h in hs {
                    h.validate()?;
                    if h.normal.len() != dim {
                        return Err(Error::InvalidArgument(format!(
                            "{what} half-space at step {k} has normal of length {}, expected {dim}",
                            h.normal.len()
                        )));
                    }
                    total += h.risk;
                }
                if total > b * (1.0 + 1e-12) {
                    return Err(Error::InvalidArgument(format!(
                        "{what} risks at step {k} sum to {total}, above the budget {b}"
                    )));
                }
            }
            Ok(())
        };
        check_rows(
            &self.state_constraints,
            &self.state_risk_budget,
            n + 1,
            nx,
            "state",
        )?;
        check_rows(
            &self.control_constraints,
            &self.control_risk_budget,
            n,
            nu,
            "control",
        )?;
        if let Some(tr) = &self.trust_region {
            let ok = tr.state_radius > 0.0
                && tr.control_radius > 0.0
                && tr.state_risk > 0.0
                && tr.state_risk < 0.5
                && tr.control_risk > 0.0
                && tr.control_risk < 0.5;
            if !ok {
                return bad("trust region needs positive radii and risks in (0, 0.5)".into());
            }
        }
        if !(self.relaxation.factor > 0.0 && self.relaxation.factor < 1.0) {
            return bad(format!(
                "relaxation factor {} outside (0, 1)",
                self.relaxation.factor
            ));
        }
        Ok(())
    }
}

/// Affine feedback policy `u_k = v_k + K_k y_k`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Policy {
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

impl Policy {
    /// Feedforward-only policy.
    pub fn open_loop(controls: Vec<DVector<f64>>, nx: usize) -> Self {
        let gains = controls
            .iter()
            .map(|v| DMatrix::zeros(v.len(), nx))
            .collect();
        Self {
            feedforward: controls,
            gains,
        }
    }

    pub fn steps(&self) -> usize {
        self.feedforward.len()
    }

    pub fn stacked_feedforward(&self) -> DVector<f64> {
        stack_vectors(&self.feedforward)
    }

    pub fn stacked_gains(&self) -> DMatrix<f64> {
        let nx = self.gains.first().map_or(0, |g| g.ncols());
        stack_gains(&self.gains, nx)
    }

    /// The same feedforward with all gains zeroed.
    pub fn without_feedback(&self) -> Self {
        Self {
            feedforward: self.feedforward.clone(),
            gains: self
                .gains
                .iter()
                .map(|g| DMatrix::zeros(g.nrows(), g.ncols()))
                .collect(),
        }
    }
}
