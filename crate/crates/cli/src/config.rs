//! Run configuration: parsing, validation and conversion to solver inputs.

use std::path::PathBuf;

use icsteer::blocks::assemble_cost_weights;
use icsteer::ics::{IcsSettings, MeanPropagation, TerminalPolicy};
use icsteer::lindisc::Scheme;
use icsteer::model::{DragDoubleIntegrator, LinearModel, Model};
use icsteer::montecarlo::SimOptions;
use icsteer::problem::{ChanceRegion, CsProblemSpec, MeanCost, Relaxation, TrustRegion};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A parse or validation failure, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

type Checked<T> = std::result::Result<T, ConfigError>;

/// A matrix given in full (list of rows) or as a multiple of the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    ScaledIdentity(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, path: &str, rows: usize, cols: usize) -> Checked<DMatrix<f64>> {
        let m = match self {
            MatrixSpec::ScaledIdentity(c) => {
                if rows != cols {
                    return Err(ConfigError::new(
                        path,
                        format!("a scalar only stands for a square matrix, need {rows}×{cols}"),
                    ));
                }
                DMatrix::identity(rows, cols) * *c
            }
            MatrixSpec::Rows(r) => {
                if r.len() != rows || r.iter().any(|row| row.len() != cols) {
                    let got_cols = r.first().map_or(0, Vec::len);
                    return Err(ConfigError::new(
                        path,
                        format!("expected {rows}×{cols}, got {}×{got_cols}", r.len()),
                    ));
                }
                DMatrix::from_fn(rows, cols, |i, j| r[i][j])
            }
        };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::new(path, "entries must be finite"));
        }
        Ok(m)
    }
}

fn vector(v: &[f64], path: &str, len: usize) -> Checked<DVector<f64>> {
    if v.len() != len {
        return Err(ConfigError::new(
            path,
            format!("expected length {len}, got {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ConfigError::new(path, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Planar double integrator with quadratic drag `c_d` and velocity
    /// noise intensity `γ`.
    DragDoubleIntegrator { drag: f64, noise: f64 },
    /// `dx = (Ax + Bu) dt + G dw`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
    },
}

impl ModelConfig {
    /// `(n_x, n_u)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            ModelConfig::DragDoubleIntegrator { .. } => (4, 2),
            ModelConfig::Linear { a, b, .. } => (a.len(), b.first().map_or(0, Vec::len)),
        }
    }

    pub fn build(&self) -> Checked<Box<dyn Model>> {
        match self {
            ModelConfig::DragDoubleIntegrator { drag, noise } => {
                DragDoubleIntegrator::new(*drag, *noise)
                    .map(|m| Box::new(m) as Box<dyn Model>)
                    .map_err(|e| ConfigError::new("model", e.to_string()))
            }
            ModelConfig::Linear { a, b, g } => {
                let nx = a.len();
                let nu = b.first().map_or(0, Vec::len);
                let nw = g.first().map_or(0, Vec::len);
                if nx == 0 || nu == 0 || nw == 0 {
                    return Err(ConfigError::new("model", "a, b and g must be non-empty"));
                }
                let a = MatrixSpec::Rows(a.clone()).to_matrix("model.a", nx, nx)?;
                let b = MatrixSpec::Rows(b.clone()).to_matrix("model.b", nx, nu)?;
                let g = MatrixSpec::Rows(g.clone()).to_matrix("model.g", nx, nw)?;
                LinearModel::new(a, b, g)
                    .map(|m| Box::new(m) as Box<dyn Model>)
                    .map_err(|e| ConfigError::new("model", e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    #[serde(rename = "N")]
    pub steps: usize,
    /// Final time `t_f − t₀`.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundary {
    pub x0_mean: Vec<f64>,
    #[serde(rename = "P_x0")]
    pub p_x0: MatrixSpec,
    pub xf_mean: Vec<f64>,
    #[serde(rename = "P_xf")]
    pub p_xf: MatrixSpec,
}

/// `ūᵀW_uū + (x̄ − x_ref)ᵀW_x(x̄ − x_ref) + q_uᵀū + q_xᵀx̄` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanCostConfig {
    pub control_weight: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_weight: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_reference: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_linear: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_linear: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub mean: MeanCostConfig,
    /// Covariance weight on every state step.
    #[serde(rename = "Qx")]
    pub qx: MatrixSpec,
    /// Covariance weight on every control step.
    #[serde(rename = "Qu")]
    pub qu: MatrixSpec,
    /// Price of the terminal-mean slack.
    pub w_xf: f64,
}

/// `aᵢᵀz ≤ αᵢ` for every row, sharing one risk budget split evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    /// Steps the region applies to; all steps when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
    pub normals: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub risk: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    #[serde(default)]
    pub state: Vec<RegionConfig>,
    #[serde(default)]
    pub control: Vec<RegionConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustRegionConfig {
    pub state_radius: f64,
    pub control_radius: f64,
    pub state_risk: f64,
    pub control_risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationConfig {
    pub iterations: usize,
    pub factor: f64,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        let r = Relaxation::default();
        Self {
            iterations: r.iterations,
            factor: r.factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanPropagationConfig {
    #[default]
    Deterministic,
    MonteCarlo {
        trials: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscretizationConfig {
    Exact { substeps: usize },
    FirstOrder,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        DiscretizationConfig::Exact { substeps: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalConfig {
    #[default]
    Soft,
    Hard,
    SoftThenHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub eps_gap: f64,
    pub max_iter: usize,
    pub over_relaxation: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = icsteer_conic::Settings::default();
        Self {
            eps_primal: s.eps_primal,
            eps_dual: s.eps_dual,
            eps_gap: s.eps_gap,
            max_iter: s.max_iter,
            over_relaxation: s.over_relaxation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcsConfig {
    pub max_iterations: usize,
    /// Bound on the largest per-step change of the feedforward.
    pub tolerance: f64,
    pub trust_region: Option<TrustRegionConfig>,
    pub relaxation: RelaxationConfig,
    pub mean_propagation: MeanPropagationConfig,
    pub discretization: DiscretizationConfig,
    /// RK4 substeps per interval for mean propagation.
    pub propagation_substeps: usize,
    pub terminal: TerminalConfig,
    /// First control guess: one entry (held over the horizon) or N entries.
    /// Zero when empty.
    pub initial_controls: Vec<Vec<f64>>,
    pub retry_infeasible: bool,
    pub solver: SolverConfig,
}

impl Default for IcsConfig {
    fn default() -> Self {
        let s = IcsSettings::default();
        Self {
            max_iterations: s.max_iterations,
            tolerance: s.tolerance,
            trust_region: None,
            relaxation: RelaxationConfig::default(),
            mean_propagation: MeanPropagationConfig::default(),
            discretization: DiscretizationConfig::default(),
            propagation_substeps: s.substeps,
            terminal: TerminalConfig::default(),
            initial_controls: Vec::new(),
            retry_infeasible: s.retry_infeasible,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub trials: usize,
    /// Euler–Maruyama substeps per interval.
    pub substeps: usize,
    pub seed: u64,
    /// Confidence level of the ellipses in `ellipses.csv`.
    pub ellipse_level: f64,
    /// Number of trials whose full paths go to `paths.csv`; none when 0.
    pub paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let s = SimOptions::default();
        Self {
            trials: s.trials,
            substeps: s.substeps,
            seed: s.seed,
            ellipse_level: 0.9,
            paths: 0,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("icsteer-run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub horizon: Horizon,
    pub boundary: Boundary,
    pub cost: CostConfig,
    #[serde(default)]
    pub constraints: Constraints,
    #[serde(default)]
    pub ics: IcsConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Everything the solver and simulator need, built from a config.
pub struct Problem {
    pub model: Box<dyn Model>,
    pub spec: CsProblemSpec,
    pub settings: IcsSettings,
    pub initial_controls: Vec<DVector<f64>>,
    pub sim: SimOptions,
    pub ellipse_level: f64,
    pub paths: usize,
}

/// Parses and validates a JSON config.
pub fn parse_config(text: &str) -> Checked<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(
            if path == "." { "(root)".into() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    config.problem()?;
    Ok(config)
}

/// Canonical JSON form; [`parse_config`] reads it back unchanged.
pub fn emit_config(config: &RunConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

fn positive(value: f64, path: &str) -> Checked<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(
            path,
            format!("must be positive and finite, got {value}"),
        ))
    }
}

fn core(path: &str) -> impl Fn(icsteer::Error) -> ConfigError + '_ {
    move |e| ConfigError::new(path, e.to_string())
}

impl RunConfig {
    /// Validates every section and builds the solver inputs.
    pub fn problem(&self) -> Checked<Problem> {
        let model = self.model.build()?;
        let (nx, nu) = (model.state_dim(), model.control_dim());
        let n = self.horizon.steps;
        if n == 0 {
            return Err(ConfigError::new("horizon.N", "must be at least 1"));
        }
        positive(self.horizon.sigma, "horizon.sigma")?;
        let sigma = self.horizon.sigma;

        let b = &self.boundary;
        let x0 = vector(&b.x0_mean, "boundary.x0_mean", nx)?;
        let xf = vector(&b.xf_mean, "boundary.xf_mean", nx)?;
        let p_x0 = b.p_x0.to_matrix("boundary.P_x0", nx, nx)?;
        let p_xf = b.p_xf.to_matrix("boundary.P_xf", nx, nx)?;

        let c = &self.cost;
        let mc = &c.mean;
        let zeros = |len| vec![0.0; len];
        let mean_cost = MeanCost {
            control_weight: mc
                .control_weight
                .to_matrix("cost.mean.control_weight", nu, nu)?,
            state_weight: match &mc.state_weight {
                Some(w) => w.to_matrix("cost.mean.state_weight", nx, nx)?,
                None => DMatrix::zeros(nx, nx),
            },
            state_reference: vector(
                mc.state_reference.as_deref().unwrap_or(&zeros(nx)),
                "cost.mean.state_reference",
                nx,
            )?,
            control_linear: vector(
                mc.control_linear.as_deref().unwrap_or(&zeros(nu)),
                "cost.mean.control_linear",
                nu,
            )?,
            state_linear: vector(
                mc.state_linear.as_deref().unwrap_or(&zeros(nx)),
                "cost.mean.state_linear",
                nx,
            )?,
        };
        let qx = c.qx.to_matrix("cost.Qx", nx, nx)?;
        let qu = c.qu.to_matrix("cost.Qu", nu, nu)?;
        positive(c.w_xf, "cost.w_xf")?;
        let weights =
            assemble_cost_weights(&vec![qx; n], &vec![qu; n], sigma, n).map_err(core("cost"))?;

        let mut spec = CsProblemSpec::new(sigma, x0, p_x0, xf, p_xf, mean_cost, weights, c.w_xf)
            .map_err(|e| ConfigError::new(boundary_or_cost(&e), e.to_string()))?;

        for (space, regions, dim, last) in [
            ("state", &self.constraints.state, nx, n),
            (
                "control",
                &self.constraints.control,
                nu,
                n.saturating_sub(1),
            ),
        ] {
            for (i, r) in regions.iter().enumerate() {
                let path = format!("constraints.{space}[{i}]");
                if r.normals.len() != r.offsets.len() || r.normals.is_empty() {
                    return Err(ConfigError::new(
                        &path,
                        format!(
                            "{} normals and {} offsets; need the same positive number",
                            r.normals.len(),
                            r.offsets.len()
                        ),
                    ));
                }
                let normals = r
                    .normals
                    .iter()
                    .enumerate()
                    .map(|(j, a)| vector(a, &format!("{path}.normals[{j}]"), dim))
                    .collect::<Checked<Vec<_>>>()?;
                if !(r.risk > 0.0 && r.risk < 0.5) {
                    return Err(ConfigError::new(
                        format!("{path}.risk"),
                        format!("must lie in (0, 0.5), got {}", r.risk),
                    ));
                }
                let steps = match &r.steps {
                    Some(s) => {
                        if let Some(k) = s.iter().find(|&&k| k > last) {
                            return Err(ConfigError::new(
                                format!("{path}.steps"),
                                format!("step {k} beyond the last {space} step {last}"),
                            ));
                        }
                        s.clone()
                    }
                    None => (0..=last).collect(),
                };
                let region = ChanceRegion {
                    normals,
                    offsets: r.offsets.clone(),
                    risk: r.risk,
                };
                let added = if space == "state" {
                    spec.add_state_region(&steps, &region)
                } else {
                    spec.add_control_region(&steps, &region)
                };
                added.map_err(core(&path))?;
            }
        }

        let ics = &self.ics;
        if ics.max_iterations == 0 {
            return Err(ConfigError::new("ics.max_iterations", "must be at least 1"));
        }
        positive(ics.tolerance, "ics.tolerance")?;
        if let Some(tr) = ics.trust_region {
            positive(tr.state_radius, "ics.trust_region.state_radius")?;
            positive(tr.control_radius, "ics.trust_region.control_radius")?;
            for (v, p) in [
                (tr.state_risk, "ics.trust_region.state_risk"),
                (tr.control_risk, "ics.trust_region.control_risk"),
            ] {
                if !(v > 0.0 && v < 1.0) {
                    return Err(ConfigError::new(p, format!("must lie in (0, 1), got {v}")));
                }
            }
            spec.trust_region = Some(TrustRegion {
                state_radius: tr.state_radius,
                control_radius: tr.control_radius,
                state_risk: tr.state_risk,
                control_risk: tr.control_risk,
            });
        }
        if !(ics.relaxation.factor > 0.0 && ics.relaxation.factor < 1.0) {
            return Err(ConfigError::new(
                "ics.relaxation.factor",
                format!("must lie in (0, 1), got {}", ics.relaxation.factor),
            ));
        }
        spec.relaxation = Relaxation {
            iterations: ics.relaxation.iterations,
            factor: ics.relaxation.factor,
        };
        spec.validate().map_err(core("constraints"))?;

        let mean_propagation = match ics.mean_propagation {
            MeanPropagationConfig::Deterministic => MeanPropagation::Deterministic,
            MeanPropagationConfig::MonteCarlo { trials, seed } => {
                if trials == 0 {
                    return Err(ConfigError::new(
                        "ics.mean_propagation.trials",
                        "must be at least 1",
                    ));
                }
                MeanPropagation::MonteCarlo { trials, seed }
            }
        };
        let scheme = match ics.discretization {
            DiscretizationConfig::Exact { substeps: 0 } => {
                return Err(ConfigError::new(
                    "ics.discretization.substeps",
                    "must be at least 1",
                ))
            }
            DiscretizationConfig::Exact { substeps } => Scheme::Exact { substeps },
            DiscretizationConfig::FirstOrder => Scheme::FirstOrder,
        };
        if ics.propagation_substeps == 0 {
            return Err(ConfigError::new(
                "ics.propagation_substeps",
                "must be at least 1",
            ));
        }
        let initial_controls = match ics.initial_controls.len() {
            0 => vec![DVector::zeros(nu); n],
            1 => vec![vector(&ics.initial_controls[0], "ics.initial_controls[0]", nu)?; n],
            len if len == n => ics
                .initial_controls
                .iter()
                .enumerate()
                .map(|(k, u)| vector(u, &format!("ics.initial_controls[{k}]"), nu))
                .collect::<Checked<Vec<_>>>()?,
            len => {
                return Err(ConfigError::new(
                    "ics.initial_controls",
                    format!("need 1 or {n} entries, got {len}"),
                ))
            }
        };
        let sv = &ics.solver;
        positive(sv.eps_primal, "ics.solver.eps_primal")?;
        positive(sv.eps_dual, "ics.solver.eps_dual")?;
        positive(sv.eps_gap, "ics.solver.eps_gap")?;
        if sv.max_iter == 0 {
            return Err(ConfigError::new(
                "ics.solver.max_iter",
                "must be at least 1",
            ));
        }
        if !(sv.over_relaxation > 0.0 && sv.over_relaxation < 2.0) {
            return Err(ConfigError::new(
                "ics.solver.over_relaxation",
                format!("must lie in (0, 2), got {}", sv.over_relaxation),
            ));
        }
        let settings = IcsSettings {
            max_iterations: ics.max_iterations,
            tolerance: ics.tolerance,
            mean_propagation,
            scheme,
            substeps: ics.propagation_substeps,
            terminal: match ics.terminal {
                TerminalConfig::Soft => TerminalPolicy::Soft,
                TerminalConfig::Hard => TerminalPolicy::Hard,
                TerminalConfig::SoftThenHard => TerminalPolicy::SoftThenHard,
            },
            solver: icsteer_conic::Settings {
                eps_primal: sv.eps_primal,
                eps_dual: sv.eps_dual,
                eps_gap: sv.eps_gap,
                max_iter: sv.max_iter,
                over_relaxation: sv.over_relaxation,
                ..icsteer_conic::Settings::default()
            },
            retry_infeasible: ics.retry_infeasible,
            ..IcsSettings::default()
        };

        let sim = &self.simulation;
        if sim.trials == 0 {
            return Err(ConfigError::new("simulation.trials", "must be at least 1"));
        }
        if sim.substeps == 0 {
            return Err(ConfigError::new(
                "simulation.substeps",
                "must be at least 1",
            ));
        }
        if !(sim.ellipse_level > 0.0 && sim.ellipse_level < 1.0) {
            return Err(ConfigError::new(
                "simulation.ellipse_level",
                format!("must lie in (0, 1), got {}", sim.ellipse_level),
            ));
        }
        if sim.paths > sim.trials {
            return Err(ConfigError::new(
                "simulation.paths",
                format!("{} paths requested from {} trials", sim.paths, sim.trials),
            ));
        }
        Ok(Problem {
            model,
            spec,
            settings,
            initial_controls,
            sim: SimOptions {
                trials: sim.trials,
                substeps: sim.substeps,
                seed: sim.seed,
                record_full_paths: false,
            },
            ellipse_level: sim.ellipse_level,
            paths: sim.paths,
        })
    }
}

/// Section blamed for a failure of the core problem checks.
fn boundary_or_cost(e: &icsteer::Error) -> &'static str {
    let msg = e.to_string();
    if msg.contains("cost") || msg.contains("weight") {
        "cost"
    } else {
        "boundary"
    }
}
