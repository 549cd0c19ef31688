//! Iterative covariance steering: successive convexification about the
//! propagated mean.

use icsteer_conic::{solve_with_guess, Settings as SolverSettings, Status, WarmStart};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::blocks::{assemble, BlockSystem};
use crate::lindisc::{discretize, rk4_mean_step, LinearizedStep, ReferenceTrajectory, Scheme};
use crate::model::Model;
use crate::montecarlo::{simulate_closed_loop, SimOptions};
use crate::problem::{
    build_subproblem, lower, CoreLayout, CsProblemSpec, Policy, SubproblemOptions, TerminalMode,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanPropagation {
    /// Integrate `dx̄/dτ = σ f(x̄, ū)` by RK4.
    Deterministic,
    /// Average closed-loop Euler–Maruyama rollouts under the current policy.
    MonteCarlo { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalPolicy {
    Soft,
    Hard,
    /// Soft until the reference ends within half the state trust radius of
    /// the target, hard afterwards.
    SoftThenHard,
}

#[derive(Debug, Clone)]
pub struct IcsSettings {
    pub max_iterations: usize,
    /// Bound on `max_k ‖v_k − û_k‖₂`.
    pub tolerance: f64,
    pub mean_propagation: MeanPropagation,
    pub scheme: Scheme,
    /// RK4 substeps per interval for mean propagation.
    pub substeps: usize,
    pub terminal: TerminalPolicy,
    pub solver: SolverSettings,
    /// Gains for the first mean propagation; zero when absent.
    pub initial_gains: Option<Vec<DMatrix<f64>>>,
    /// Retry an infeasible subproblem once with doubled trust radii.
    pub retry_infeasible: bool,
    /// Start each solve from the previous iteration's solution when the
    /// programs have the same shape.
    pub warm_start: bool,
}

impl Default for IcsSettings {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            tolerance: 1e-3,
            mean_propagation: MeanPropagation::Deterministic,
            scheme: Scheme::Exact { substeps: 10 },
            substeps: 10,
            terminal: TerminalPolicy::Soft,
            solver: SolverSettings::default(),
            initial_gains: None,
            retry_infeasible: true,
            warm_start: true,
        }
    }
}

fn serialize_status<S: serde::Serializer>(
    s: &Status,
    ser: S,
) -> std::result::Result<S::Ok, S::Error> {
    ser.serialize_str(s.as_str())
}

/// One pass of the outer loop.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    /// 1-based.
    pub index: usize,
    pub reference: ReferenceTrajectory,
    pub policy: Policy,
    /// Subproblem objective at the returned solution.
    pub objective: f64,
    /// `‖x̄_N − x̄_f‖₂` predicted by the linearized model for the new policy.
    pub terminal_mean_error: f64,
    /// `‖x̂_N − x̄_f‖∞` of the reference the subproblem was built on.
    pub reference_terminal_error: f64,
    /// `max_k ‖v_k − û_k‖₂`.
    pub max_control_change: f64,
    pub offset_scale: f64,
    pub terminal_mode: TerminalMode,
    /// Whether the trust region had to be widened for this iteration.
    pub retried: bool,
    #[serde(serialize_with = "serialize_status")]
    pub status: Status,
    pub residual_primal: f64,
    pub residual_dual: f64,
    pub residual_gap: f64,
    pub solver_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct IcsOutcome {
    pub policy: Policy,
    pub history: Vec<IterationRecord>,
    /// Discretization used by the final subproblem.
    pub steps: Vec<LinearizedStep>,
    pub blocks: BlockSystem,
}

/// Mean trajectory under a zero-order-hold control sequence, integrating
/// `dx̄/dτ = σ f(x̄, ū_k, στ)` by RK4 with `substeps` per interval.
pub fn propagate_mean<M: Model + ?Sized>(
    model: &M,
    controls: &[DVector<f64>],
    sigma: f64,
    x0: &DVector<f64>,
    substeps: usize,
) -> Result<Vec<DVector<f64>>> {
    let n = controls.len();
    if n == 0 || substeps == 0 {
        return Err(Error::InvalidArgument(
            "need at least one control and one substep".into(),
        ));
    }
    if x0.len() != model.state_dim() || controls.iter().any(|u| u.len() != model.control_dim()) {
        return Err(Error::InvalidArgument(
            "mean propagation inputs do not match the model".into(),
        ));
    }
    let dtau = 1.0 / n as f64;
    let h = dtau / substeps as f64;
    let mut states = Vec::with_capacity(n + 1);
    let mut x = x0.clone();
    states.push(x.clone());
    for (k, u) in controls.iter().enumerate() {
        for s in 0..substeps {
            let tau = k as f64 * dtau + s as f64 * h;
            x = rk4_mean_step(model, &x, u, tau, h, sigma);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        states.push(x.clone());
    }
    Ok(states)
}

/// Splits a stacked feedforward and block feedback matrix into per-step
/// terms, rejecting gains outside the block-diagonal pattern.
pub fn reshape_policy(v: &DVector<f64>, k: &DMatrix<f64>, nx: usize, nu: usize) -> Result<Policy> {
    if nu == 0 || !v.len().is_multiple_of(nu) {
        return Err(Error::Internal(format!(
            "feedforward of length {} with n_u = {nu}",
            v.len()
        )));
    }
    let n = v.len() / nu;
    if k.shape() != (n * nu, (n + 1) * nx) {
        return Err(Error::Internal(format!(
            "feedback matrix is {}×{}, expected {}×{}",
            k.nrows(),
            k.ncols(),
            n * nu,
            (n + 1) * nx
        )));
    }
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            if i / nu != j / nx && k[(i, j)] != 0.0 {
                return Err(Error::Internal(format!(
                    "feedback entry ({i}, {j}) lies outside the block-diagonal pattern"
                )));
            }
        }
    }
    Ok(Policy {
        feedforward: (0..n).map(|s| v.rows(s * nu, nu).into_owned()).collect(),
        gains: (0..n)
            .map(|s| k.view((s * nu, s * nx), (nu, nx)).into_owned())
            .collect(),
    })
}

/// Smallest scale `≥ 1` that puts the reference strictly inside every
/// positive-offset chance half-space with a 5% margin.
fn initial_offset_scale(spec: &CsProblemSpec, reference: &ReferenceTrajectory) -> f64 {
    let mut s0 = 1.0f64;
    for (k, hs) in spec.state_constraints.iter().enumerate() {
        for h in hs.iter().filter(|h| h.offset > 0.0) {
            s0 = s0.max(1.05 * h.normal.dot(&reference.states[k]) / h.offset);
        }
    }
    for (k, hs) in spec.control_constraints.iter().enumerate() {
        for h in hs.iter().filter(|h| h.offset > 0.0) {
            s0 = s0.max(1.05 * h.normal.dot(&reference.controls[k]) / h.offset);
        }
    }
    s0
}

fn offset_scale(spec: &CsProblemSpec, s0: f64, since_reset: usize) -> f64 {
    if since_reset >= spec.relaxation.iterations {
        1.0
    } else {
        (s0 * spec.relaxation.factor.powi(since_reset as i32)).max(1.0)
    }
}

/// Identity dynamics, used where a policy has no feedback yet.
fn placeholder_steps(n: usize, nx: usize, nu: usize) -> Vec<LinearizedStep> {
    vec![
        LinearizedStep {
            a: DMatrix::identity(nx, nx),
            b: DMatrix::zeros(nx, nu),
            r: DVector::zeros(nx),
            g: DMatrix::zeros(nx, nx),
            sigma_noise: DMatrix::zeros(nx, nx),
        };
        n
    ]
}

struct Attempt {
    policy: Policy,
    objective: f64,
    status: Status,
    residuals: icsteer_conic::Residuals,
    iterations: usize,
    guess: Option<(usize, usize, WarmStart)>,
}

fn solve_subproblem(
    blocks: &BlockSystem,
    spec: &CsProblemSpec,
    reference: &ReferenceTrajectory,
    options: SubproblemOptions,
    settings: &IcsSettings,
    guess: Option<&(usize, usize, WarmStart)>,
) -> Result<Attempt> {
    let parts = build_subproblem(blocks, spec, reference, options)?;
    let lowered = lower(&parts)?;
    let shape = (lowered.program.num_vars(), lowered.program.num_rows());
    let start = guess
        .filter(|g| settings.warm_start && (g.0, g.1) == shape)
        .map(|g| &g.2);
    let sol = solve_with_guess(&lowered.program, &settings.solver, start)?;
    let layout = CoreLayout::new(spec.steps, spec.nx(), spec.nu());
    let (policy, _) = layout.unpack(&lowered.core(&sol));
    Ok(Attempt {
        policy,
        objective: lowered.objective(&sol),
        status: sol.status,
        residuals: sol.residuals,
        iterations: sol.iterations,
        guess: Some((shape.0, shape.1, sol.warm_start())),
    })
}

/// Runs the outer loop from an initial control sequence.
///
/// Returns once the largest per-step change of the feedforward drops to the
/// tolerance with the chance constraints fully tightened.
pub fn ics_solve<M: Model + ?Sized>(
    model: &M,
    spec: &CsProblemSpec,
    initial_controls: &[DVector<f64>],
    settings: &IcsSettings,
) -> Result<IcsOutcome> {
    spec.validate()?;
    let (n, nx, nu) = (spec.steps, spec.nx(), spec.nu());
    if initial_controls.len() != n || initial_controls.iter().any(|u| u.len() != nu) {
        return Err(Error::InvalidArgument(format!(
            "initial guess needs {n} controls of length {nu}"
        )));
    }
    if model.state_dim() != nx || model.control_dim() != nu {
        return Err(Error::InvalidArgument(
            "problem dimensions do not match the model".into(),
        ));
    }
    if settings.max_iterations == 0 || !(settings.tolerance > 0.0) {
        return Err(Error::InvalidArgument(
            "need max_iterations ≥ 1 and tolerance > 0".into(),
        ));
    }

    let mut controls = initial_controls.to_vec();
    let mut gains = match &settings.initial_gains {
        Some(g) if g.len() == n && g.iter().all(|m| m.shape() == (nu, nx)) => g.clone(),
        Some(_) => {
            return Err(Error::InvalidArgument(
                "initial gains have the wrong shape".into(),
            ))
        }
        None => vec![DMatrix::zeros(nu, nx); n],
    };
    let mut previous_steps: Option<Vec<LinearizedStep>> = None;
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut s0 = 1.0;
    let mut relax_start = 0usize;
    let mut guess = None;

    for i in 0..settings.max_iterations {
        let states = match settings.mean_propagation {
            MeanPropagation::Deterministic => propagate_mean(
                model,
                &controls,
                spec.sigma,
                &spec.x0_mean,
                settings.substeps,
            )?,
            MeanPropagation::MonteCarlo { trials, seed } => {
                let policy = Policy {
                    feedforward: controls.clone(),
                    gains: gains.clone(),
                };
                let steps = previous_steps
                    .clone()
                    .unwrap_or_else(|| placeholder_steps(n, nx, nu));
                let opts = SimOptions {
                    trials,
                    substeps: settings.substeps,
                    seed,
                    record_full_paths: false,
                };
                simulate_closed_loop(
                    model,
                    &policy,
                    &steps,
                    &spec.x0_mean,
                    &spec.p_x0,
                    spec.sigma,
                    &opts,
                )?
                .means
            }
        };
        let reference = ReferenceTrajectory::new(states, controls.clone(), spec.sigma)?;
        if i == 0 {
            s0 = initial_offset_scale(spec, &reference);
        }
        let steps = discretize(model, &reference, settings.scheme)?;
        let blocks = assemble(&steps, spec.sigma, &spec.p_x0)?;

        let ref_error = (&reference.states[n] - &spec.xf_mean).amax();
        let terminal = match settings.terminal {
            TerminalPolicy::Soft => TerminalMode::Soft,
            TerminalPolicy::Hard => TerminalMode::Hard,
            TerminalPolicy::SoftThenHard => match spec.trust_region {
                Some(tr) if ref_error <= 0.5 * tr.state_radius => TerminalMode::Hard,
                _ => TerminalMode::Soft,
            },
        };
        let mut options = SubproblemOptions {
            terminal,
            offset_scale: offset_scale(spec, s0, i - relax_start),
        };
        let mut attempt =
            solve_subproblem(&blocks, spec, &reference, options, settings, guess.as_ref())?;
        let mut retried = false;
        if attempt.status != Status::Optimal && settings.retry_infeasible {
            retried = true;
            let mut wide = spec.clone();
            wide.trust_region = spec.trust_region.map(|tr| tr.widened(2.0));
            relax_start = i;
            s0 = initial_offset_scale(spec, &reference);
            options.offset_scale = offset_scale(spec, s0, 0);
            attempt = solve_subproblem(&blocks, &wide, &reference, options, settings, None)?;
        }

        let change = attempt
            .policy
            .feedforward
            .iter()
            .zip(&controls)
            .map(|(v, u)| (v - u).norm())
            .fold(0.0f64, f64::max);
        let v = attempt.policy.stacked_feedforward();
        let predicted = blocks.mean_states(&spec.x0_mean, &v).rows(n * nx, nx) - &spec.xf_mean;
        history.push(IterationRecord {
            index: i + 1,
            reference,
            policy: attempt.policy.clone(),
            objective: attempt.objective,
            terminal_mean_error: predicted.norm(),
            reference_terminal_error: ref_error,
            max_control_change: change,
            offset_scale: options.offset_scale,
            terminal_mode: terminal,
            retried,
            status: attempt.status,
            residual_primal: attempt.residuals.primal,
            residual_dual: attempt.residuals.dual,
            residual_gap: attempt.residuals.gap,
            solver_iterations: attempt.iterations,
        });
        if attempt.status != Status::Optimal {
            return Err(Error::Subproblem {
                iteration: i + 1,
                status: attempt.status,
                history,
            });
        }
        guess = attempt.guess;

        if change <= settings.tolerance && options.offset_scale == 1.0 {
            return Ok(IcsOutcome {
                policy: attempt.policy,
                history,
                steps,
                blocks,
            });
        }
        controls = attempt.policy.feedforward;
        gains = attempt.policy.gains;
        previous_steps = Some(steps);
    }
    Err(Error::NotConverged { history })
}
