//! `run_report.json` and its text rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use icsteer::ics::IterationRecord;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, io_error, McSummary, StepRate};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSummary {
    pub iteration: usize,
    pub objective: f64,
    pub max_control_change: f64,
    pub terminal_mean_error: f64,
    pub status: String,
    pub solver_iterations: usize,
}

impl From<&IterationRecord> for IterationSummary {
    fn from(r: &IterationRecord) -> Self {
        Self {
            iteration: r.index,
            objective: r.objective,
            max_control_change: r.max_control_change,
            terminal_mean_error: r.terminal_mean_error,
            status: r.status.as_str().into(),
            solver_iterations: r.solver_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    /// `converged`, `subproblem_failed`, `not_converged` or `failed`.
    pub status: String,
    pub message: Option<String>,
    pub tolerance: f64,
    pub iterations: Vec<IterationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub trials: usize,
    pub divergent: usize,
    pub seed: u64,
    pub substeps: usize,
    pub terminal_mean: Vec<f64>,
    pub terminal_mean_error: f64,
    pub covariance_excess: f64,
    pub max_state_violation: Option<StepRate>,
}

impl From<&McSummary> for SimulationSection {
    fn from(s: &McSummary) -> Self {
        Self {
            trials: s.trials,
            divergent: s.divergent,
            seed: s.seed,
            substeps: s.substeps,
            terminal_mean: s.terminal_mean.clone(),
            terminal_mean_error: s.terminal_mean_error,
            covariance_excess: s.covariance_excess,
            max_state_violation: s.max_state_violation,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub solve: Option<SolveSection>,
    pub simulation: Option<SimulationSection>,
    /// Files written into the run directory, sorted.
    pub manifest: Vec<String>,
}

impl RunReport {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(artifacts::REPORT);
        let text = fs::read_to_string(&path).map_err(io_error(&path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Loads the report in `dir`, or starts an empty one if there is none.
    pub fn load_or_default(dir: &Path) -> Result<Self, CliError> {
        if dir.join(artifacts::REPORT).exists() {
            Self::load(dir)
        } else {
            Ok(Self::default())
        }
    }

    pub fn record(&mut self, name: &str) {
        if !self.manifest.iter().any(|m| m == name) {
            self.manifest.push(name.to_string());
            self.manifest.sort();
        }
    }

    pub fn save(&mut self, dir: &Path) -> Result<(), CliError> {
        self.record(artifacts::REPORT);
        artifacts::write_json(&dir.join(artifacts::REPORT), self)
    }
}

/// Six significant digits, fixed notation for moderate magnitudes.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    format!("{x:.*}", (5 - mag) as usize)
}

fn vector(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| sig6(*x)).collect();
    format!("[{}]", parts.join(", "))
}

/// Renders a report as text. `summary` adds the per-step violation table.
pub fn emit_report(report: &RunReport, summary: Option<&McSummary>) -> String {
    let mut out = String::new();
    match &report.solve {
        Some(s) => {
            let _ = writeln!(out, "solve: {}", s.status);
            if let Some(m) = &s.message {
                let _ = writeln!(out, "message: {m}");
            }
            let _ = writeln!(out, "tolerance: {}", sig6(s.tolerance));
            let _ = writeln!(
                out,
                "{:>9} {:>14} {:>14} {:>14} {:>10} {:>8}",
                "iteration", "objective", "control_change", "terminal_error", "status", "admm"
            );
            for it in &s.iterations {
                let _ = writeln!(
                    out,
                    "{:>9} {:>14} {:>14} {:>14} {:>10} {:>8}",
                    it.iteration,
                    sig6(it.objective),
                    sig6(it.max_control_change),
                    sig6(it.terminal_mean_error),
                    it.status,
                    it.solver_iterations
                );
            }
        }
        None => out.push_str("solve: none\n"),
    }
    match &report.simulation {
        Some(s) => {
            let _ = writeln!(
                out,
                "simulation: {} trials, {} divergent, seed {}, {} substeps",
                s.trials, s.divergent, s.seed, s.substeps
            );
            let _ = writeln!(out, "terminal mean: {}", vector(&s.terminal_mean));
            let _ = writeln!(out, "terminal mean error: {}", sig6(s.terminal_mean_error));
            let _ = writeln!(out, "covariance excess: {}", sig6(s.covariance_excess));
            if let Some(v) = s.max_state_violation {
                let _ = writeln!(
                    out,
                    "max state violation: {} at step {}",
                    sig6(v.rate),
                    v.step
                );
            }
            if let Some(m) = summary {
                if !m.state_violations.is_empty() {
                    let _ = writeln!(out, "{:>5} {:>10}", "step", "violation");
                    for r in &m.state_violations {
                        let _ = writeln!(out, "{:>5} {:>10}", r.step, sig6(r.rate));
                    }
                }
            }
        }
        None => out.push_str("simulation: none\n"),
    }
    let _ = writeln!(out, "files: {}", report.manifest.join(", "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(-123.4567891), "-123.457");
        assert_eq!(sig6(0.001234567), "0.00123457");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(2.5e8), "2.50000e8");
    }

    #[test]
    fn empty_simulation_gives_solve_only_report() {
        let report = RunReport {
            solve: Some(SolveSection {
                status: "converged".into(),
                message: None,
                tolerance: 1e-3,
                iterations: vec![],
            }),
            simulation: None,
            manifest: vec!["policy.json".into()],
        };
        let text = emit_report(&report, None);
        assert!(text.starts_with("solve: converged\n"));
        assert!(text.contains("simulation: none\n"));
        assert!(text.ends_with("files: policy.json\n"));
    }

    #[test]
    fn manifest_stays_sorted_and_unique() {
        let mut r = RunReport::default();
        r.record("b.csv");
        r.record("a.json");
        r.record("b.csv");
        assert_eq!(r.manifest, ["a.json", "b.csv"]);
    }
}
