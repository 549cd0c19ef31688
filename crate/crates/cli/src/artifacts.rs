//! File formats written and read by the front end.

use std::fs;
use std::path::{Path, PathBuf};

use icsteer::ics::{IcsOutcome, IterationRecord};
use icsteer::lindisc::LinearizedStep;
use icsteer::montecarlo::{confidence_ellipse, SimulationResult};
use icsteer::problem::{CsProblemSpec, HalfSpace, Policy};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const POLICY: &str = "policy.json";
pub const ITERATIONS: &str = "iterations.csv";
pub const REFERENCE: &str = "reference_trajectory.csv";
pub const MC_SUMMARY: &str = "mc_summary.json";
pub const ELLIPSES: &str = "ellipses.csv";
pub const PATHS: &str = "paths.csv";
pub const REPORT: &str = "run_report.json";

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let cols = r.first().map_or(0, Vec::len);
    if r.iter().any(|row| row.len() != cols) {
        return None;
    }
    Some(DMatrix::from_fn(r.len(), cols, |i, j| r[i][j]))
}

fn entries(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    let file = fs::File::create(path).map_err(io_error(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// The converged policy plus what the simulator and reports need from
/// the final linearization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub steps: usize,
    pub nx: usize,
    pub nu: usize,
    pub sigma: f64,
    /// `v_k`, one per step.
    pub feedforward: Vec<Vec<f64>>,
    /// `K_k` as rows, one per step.
    pub gains: Vec<Vec<Vec<f64>>>,
    /// `A_k` of the final discretization, used to advance the controller
    /// state.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Mean and covariance of `x_k` predicted by the final linearization.
    pub predicted_means: Vec<Vec<f64>>,
    pub predicted_covariances: Vec<Vec<Vec<f64>>>,
}

impl PolicyFile {
    pub fn from_outcome(out: &IcsOutcome, spec: &CsProblemSpec) -> Self {
        let (n, nx, nu) = (spec.steps, spec.nx(), spec.nu());
        let blocks = &out.blocks;
        let means = blocks.mean_states(&spec.x0_mean, &out.policy.stacked_feedforward());
        let px = blocks.state_covariance(&out.policy.stacked_gains());
        Self {
            steps: n,
            nx,
            nu,
            sigma: spec.sigma,
            feedforward: out.policy.feedforward.iter().map(entries).collect(),
            gains: out.policy.gains.iter().map(rows).collect(),
            transition: out.steps.iter().map(|s| rows(&s.a)).collect(),
            predicted_means: (0..=n)
                .map(|k| means.rows(k * nx, nx).iter().copied().collect())
                .collect(),
            predicted_covariances: (0..=n)
                .map(|k| rows(&px.view((k * nx, k * nx), (nx, nx)).into_owned()))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::Input(format!("{}: {}: {}", path.display(), e.path(), e.inner()))
        })
    }

    /// Checks the file against the configured problem and rebuilds the
    /// policy and the transition matrices.
    pub fn unpack(
        &self,
        source: &Path,
        spec: &CsProblemSpec,
    ) -> Result<(Policy, Vec<LinearizedStep>), CliError> {
        let (n, nx, nu) = (spec.steps, spec.nx(), spec.nu());
        let mismatch = |what: &str, file: usize, config: usize| {
            CliError::Input(format!(
                "{} has {what} = {file} but the config has {what} = {config}",
                source.display()
            ))
        };
        if self.steps != n {
            return Err(mismatch("N", self.steps, n));
        }
        if self.nx != nx {
            return Err(mismatch("n_x", self.nx, nx));
        }
        if self.nu != nu {
            return Err(mismatch("n_u", self.nu, nu));
        }
        let bad = |field: &str| {
            CliError::Input(format!(
                "{}: {field} does not match N = {n}, n_x = {nx}, n_u = {nu}",
                source.display()
            ))
        };
        if self.feedforward.len() != n || self.feedforward.iter().any(|v| v.len() != nu) {
            return Err(bad("feedforward"));
        }
        let mat = |r: &[Vec<f64>], shape: (usize, usize), field: &str| {
            from_rows(r)
                .filter(|m| m.shape() == shape)
                .ok_or_else(|| bad(field))
        };
        if self.gains.len() != n || self.transition.len() != n {
            return Err(bad("gains or transition"));
        }
        let gains = self
            .gains
            .iter()
            .map(|g| mat(g, (nu, nx), "gains"))
            .collect::<Result<Vec<_>, _>>()?;
        let steps = self
            .transition
            .iter()
            .map(|a| {
                Ok(LinearizedStep {
                    a: mat(a, (nx, nx), "transition")?,
                    b: DMatrix::zeros(nx, nu),
                    r: DVector::zeros(nx),
                    g: DMatrix::zeros(nx, nx),
                    sigma_noise: DMatrix::zeros(nx, nx),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let policy = Policy {
            feedforward: self
                .feedforward
                .iter()
                .map(|v| DVector::from_column_slice(v))
                .collect(),
            gains,
        };
        Ok((policy, steps))
    }

    pub fn predicted_covariance(&self, k: usize) -> Option<DMatrix<f64>> {
        from_rows(&self.predicted_covariances[k])
    }
}

#[derive(Serialize)]
struct IterationRow<'a> {
    iteration: usize,
    objective: f64,
    max_control_change: f64,
    terminal_mean_error: f64,
    reference_terminal_error: f64,
    offset_scale: f64,
    terminal_mode: &'a str,
    retried: bool,
    status: &'a str,
    solver_iterations: usize,
    residual_primal: f64,
    residual_dual: f64,
    residual_gap: f64,
}

pub fn write_iterations(path: &Path, history: &[IterationRecord]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    for r in history {
        let mode = match r.terminal_mode {
            icsteer::problem::TerminalMode::Soft => "soft",
            icsteer::problem::TerminalMode::Hard => "hard",
        };
        w.serialize(IterationRow {
            iteration: r.index,
            objective: r.objective,
            max_control_change: r.max_control_change,
            terminal_mean_error: r.terminal_mean_error,
            reference_terminal_error: r.reference_terminal_error,
            offset_scale: r.offset_scale,
            terminal_mode: mode,
            retried: r.retried,
            status: r.status.as_str(),
            solver_iterations: r.solver_iterations,
            residual_primal: r.residual_primal,
            residual_dual: r.residual_dual,
            residual_gap: r.residual_gap,
        })
        .map_err(csv_error(path))?;
    }
    if history.is_empty() {
        // serialize() writes the header with the first row
        w.write_record([
            "iteration",
            "objective",
            "max_control_change",
            "terminal_mean_error",
            "reference_terminal_error",
            "offset_scale",
            "terminal_mode",
            "retried",
            "status",
            "solver_iterations",
            "residual_primal",
            "residual_dual",
            "residual_gap",
        ])
        .map_err(csv_error(path))?;
    }
    w.flush().map_err(io_error(path))
}

/// Reference states `x̂_k` of the last linearization and the returned
/// feedforward `v_k` (blank at the final step).
pub fn write_reference(path: &Path, record: &IterationRecord) -> Result<(), CliError> {
    let reference = &record.reference;
    let n = reference.steps();
    let nx = reference.states[0].len();
    let nu = reference.controls[0].len();
    let mut w = csv_writer(path)?;
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((1..=nx).map(|i| format!("x{i}")));
    header.extend((1..=nu).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_error(path))?;
    for k in 0..=n {
        let mut row = vec![
            k.to_string(),
            (reference.sigma * k as f64 / n as f64).to_string(),
        ];
        row.extend(reference.states[k].iter().map(|v| v.to_string()));
        if k < n {
            row.extend(record.policy.feedforward[k].iter().map(|v| v.to_string()));
        } else {
            row.extend(std::iter::repeat_n(String::new(), nu));
        }
        w.write_record(&row).map_err(csv_error(path))?;
    }
    w.flush().map_err(io_error(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpaceRate {
    pub space: String,
    pub step: usize,
    /// Position in the step's list of half-spaces.
    pub index: usize,
    pub normal: Vec<f64>,
    pub offset: f64,
    pub risk: f64,
    pub rate: f64,
}

/// Fraction of trials violating at least one half-space at a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRate {
    pub step: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub trials: usize,
    pub divergent: usize,
    pub seed: u64,
    pub substeps: usize,
    pub terminal_mean: Vec<f64>,
    pub terminal_covariance: Vec<Vec<f64>>,
    pub target_mean: Vec<f64>,
    pub target_covariance: Vec<Vec<f64>>,
    /// `max_i |x̂_N,i − x̄_f,i|` over the empirical terminal mean.
    pub terminal_mean_error: f64,
    /// Largest eigenvalue of `P̂_N − P_xf`; nonpositive when the bound holds.
    pub covariance_excess: f64,
    pub means: Vec<Vec<f64>>,
    pub state_violations: Vec<StepRate>,
    pub control_violations: Vec<StepRate>,
    pub half_spaces: Vec<HalfSpaceRate>,
    /// Worst entry of `state_violations`, if any state constraint exists.
    pub max_state_violation: Option<StepRate>,
}

fn any_violated(samples: &DMatrix<f64>, hs: &[HalfSpace]) -> f64 {
    if samples.ncols() == 0 {
        return 0.0;
    }
    let hits = samples
        .column_iter()
        .filter(|x| hs.iter().any(|h| h.normal.dot(x) > h.offset))
        .count();
    hits as f64 / samples.ncols() as f64
}

impl McSummary {
    pub fn new(sim: &SimulationResult, spec: &CsProblemSpec, seed: u64, substeps: usize) -> Self {
        let mean = sim.terminal_mean();
        let excess = sim.terminal_covariance() - &spec.p_xf;
        let excess = ((&excess + excess.transpose()) * 0.5)
            .symmetric_eigenvalues()
            .max();
        let step_rates = |samples: &[DMatrix<f64>], cons: &[Vec<HalfSpace>]| -> Vec<StepRate> {
            cons.iter()
                .enumerate()
                .filter(|(_, hs)| !hs.is_empty())
                .map(|(k, hs)| StepRate {
                    step: k,
                    rate: any_violated(&samples[k], hs),
                })
                .collect()
        };
        let state_violations = step_rates(&sim.samples, &spec.state_constraints);
        let control_violations = step_rates(&sim.control_samples, &spec.control_constraints);
        let mut half_spaces = Vec::new();
        for (space, samples, cons) in [
            ("state", &sim.samples, &spec.state_constraints),
            ("control", &sim.control_samples, &spec.control_constraints),
        ] {
            for (k, hs) in cons.iter().enumerate() {
                for (i, h) in hs.iter().enumerate() {
                    half_spaces.push(HalfSpaceRate {
                        space: space.into(),
                        step: k,
                        index: i,
                        normal: entries(&h.normal),
                        offset: h.offset,
                        risk: h.risk,
                        rate: any_violated(&samples[k], std::slice::from_ref(h)),
                    });
                }
            }
        }
        let max_state_violation =
            state_violations
                .iter()
                .copied()
                .fold(None, |best: Option<StepRate>, r| match best {
                    Some(b) if b.rate >= r.rate => Some(b),
                    _ => Some(r),
                });
        Self {
            trials: sim.trials,
            divergent: sim.divergent,
            seed,
            substeps,
            terminal_mean: entries(mean),
            terminal_covariance: rows(sim.terminal_covariance()),
            target_mean: entries(&spec.xf_mean),
            target_covariance: rows(&spec.p_xf),
            terminal_mean_error: (mean - &spec.xf_mean).amax(),
            covariance_excess: excess,
            means: sim.means.iter().map(entries).collect(),
            state_violations,
            control_violations,
            half_spaces,
            max_state_violation,
        }
    }
}

#[derive(Serialize)]
struct EllipseRow {
    step: usize,
    source: &'static str,
    center_x: f64,
    center_y: f64,
    semi_major: f64,
    semi_minor: f64,
    rotation: f64,
}

fn plane(m: &DMatrix<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Confidence ellipses of `(x₁, x₂)` per step, from the Monte Carlo sample
/// and from the linear prediction.
pub fn write_ellipses(
    path: &Path,
    sim: &SimulationResult,
    policy: &PolicyFile,
    level: f64,
) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let mut emit = |step, source, mean: [f64; 2], cov: [[f64; 2]; 2]| -> Result<(), CliError> {
        let e = confidence_ellipse(mean, cov, level).map_err(CliError::Simulate)?;
        w.serialize(EllipseRow {
            step,
            source,
            center_x: e.center[0],
            center_y: e.center[1],
            semi_major: e.semi_axes[0],
            semi_minor: e.semi_axes[1],
            rotation: e.rotation,
        })
        .map_err(csv_error(path))
    };
    for k in 0..sim.means.len() {
        let m = &sim.means[k];
        emit(k, "monte_carlo", [m[0], m[1]], plane(&sim.covariances[k]))?;
        if let Some(p) = policy.predicted_covariance(k) {
            let pm = &policy.predicted_means[k];
            emit(k, "linear", [pm[0], pm[1]], plane(&p))?;
        }
    }
    w.flush().map_err(io_error(path))
}

/// Full Euler–Maruyama paths, one row per trial and substep.
pub fn write_paths(path: &Path, paths: &[DMatrix<f64>], sigma: f64) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let nx = paths.first().map_or(0, |p| p.nrows());
    let mut header = vec!["trial".to_string(), "time".to_string()];
    header.extend((1..=nx).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_error(path))?;
    for (trial, p) in paths.iter().enumerate() {
        let last = (p.ncols() - 1).max(1) as f64;
        for (j, col) in p.column_iter().enumerate() {
            let mut row = vec![trial.to_string(), (sigma * j as f64 / last).to_string()];
            row.extend(col.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_error(path))?;
        }
    }
    w.flush().map_err(io_error(path))
}

pub fn artifact(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
