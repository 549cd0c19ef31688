//! The `solve` and `simulate` commands.

use std::fs;
use std::path::{Path, PathBuf};

use icsteer::ics::{ics_solve, IterationRecord};
use icsteer::montecarlo::{simulate_closed_loop, SimOptions};
use icsteer::Error;

use crate::artifacts::{self, io_error, McSummary, PolicyFile};
use crate::config::RunConfig;
use crate::report::{IterationSummary, RunReport, SimulationSection, SolveSection};
use crate::CliError;

/// `--out` (or its environment variable) wins over the config.
pub fn output_dir(config: &RunConfig, overridden: Option<&Path>) -> PathBuf {
    overridden.map_or_else(|| config.output_dir.clone(), Path::to_path_buf)
}

fn create(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_error(dir))
}

/// Runs the outer loop and writes `policy.json`, `iterations.csv`,
/// `reference_trajectory.csv` and `run_report.json`.
///
/// On failure the iterations completed so far are still written and the
/// report carries the error.
pub fn solve(config: &RunConfig, dir: &Path) -> Result<RunReport, CliError> {
    let p = config.problem()?;
    create(dir)?;
    let outcome = ics_solve(&*p.model, &p.spec, &p.initial_controls, &p.settings);
    let mut report = RunReport::default();
    let (status, history, error): (&str, &[IterationRecord], Option<&Error>) = match &outcome {
        Ok(o) => ("converged", &o.history, None),
        Err(e @ Error::Subproblem { history, .. }) => ("subproblem_failed", history, Some(e)),
        Err(e @ Error::NotConverged { history }) => ("not_converged", history, Some(e)),
        Err(e) => ("failed", &[], Some(e)),
    };
    artifacts::write_iterations(&dir.join(artifacts::ITERATIONS), history)?;
    report.record(artifacts::ITERATIONS);
    if let Some(last) = history.last() {
        artifacts::write_reference(&dir.join(artifacts::REFERENCE), last)?;
        report.record(artifacts::REFERENCE);
    }
    if let Ok(o) = &outcome {
        artifacts::write_json(
            &dir.join(artifacts::POLICY),
            &PolicyFile::from_outcome(o, &p.spec),
        )?;
        report.record(artifacts::POLICY);
    }
    report.solve = Some(SolveSection {
        status: status.into(),
        message: error.map(ToString::to_string),
        tolerance: p.settings.tolerance,
        iterations: history.iter().map(IterationSummary::from).collect(),
    });
    report.save(dir)?;
    match outcome {
        Ok(_) => Ok(report),
        Err(Error::InvalidArgument(m)) => Err(CliError::Input(m)),
        Err(e) => Err(CliError::Solve(e)),
    }
}

/// Overrides applied to the configured simulation.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOverrides {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
}

/// Simulates a stored policy and writes `mc_summary.json`, `ellipses.csv`
/// and, when configured, `paths.csv`. Adds a simulation section to
/// `run_report.json` in `dir`, creating it if needed.
pub fn simulate(
    config: &RunConfig,
    policy_path: &Path,
    overrides: SimOverrides,
    dir: &Path,
) -> Result<RunReport, CliError> {
    let p = config.problem()?;
    let stored = PolicyFile::load(policy_path)?;
    let (policy, steps) = stored.unpack(policy_path, &p.spec)?;
    let opts = SimOptions {
        trials: overrides.trials.unwrap_or(p.sim.trials),
        seed: overrides.seed.unwrap_or(p.sim.seed),
        ..p.sim
    };
    if opts.trials == 0 {
        return Err(CliError::Input("trials must be positive".into()));
    }
    let spec = &p.spec;
    let run = |opts: &SimOptions| {
        simulate_closed_loop(
            &*p.model,
            &policy,
            &steps,
            &spec.x0_mean,
            &spec.p_x0,
            spec.sigma,
            opts,
        )
        .map_err(|e| match e {
            Error::InvalidArgument(m) => CliError::Input(m),
            e => CliError::Simulate(e),
        })
    };
    let sim = run(&opts)?;
    create(dir)?;
    let mut report = RunReport::load_or_default(dir)?;
    let summary = McSummary::new(&sim, spec, opts.seed, opts.substeps);
    artifacts::write_json(&dir.join(artifacts::MC_SUMMARY), &summary)?;
    report.record(artifacts::MC_SUMMARY);
    if spec.nx() >= 2 {
        artifacts::write_ellipses(
            &dir.join(artifacts::ELLIPSES),
            &sim,
            &stored,
            p.ellipse_level,
        )?;
        report.record(artifacts::ELLIPSES);
    }
    if p.paths > 0 {
        // trial streams depend only on (seed, trial), so these are the first
        // paths of the run above
        let sub = SimOptions {
            trials: p.paths.min(opts.trials),
            record_full_paths: true,
            ..opts
        };
        let paths = run(&sub)?.paths.unwrap_or_default();
        artifacts::write_paths(&dir.join(artifacts::PATHS), &paths, spec.sigma)?;
        report.record(artifacts::PATHS);
    }
    report.simulation = Some(SimulationSection::from(&summary));
    report.save(dir)?;
    Ok(report)
}

/// Loads `run_report.json` and, if present, `mc_summary.json` from a run
/// directory and renders them.
pub fn report(dir: &Path) -> Result<String, CliError> {
    let report = RunReport::load(dir)?;
    let path = dir.join(artifacts::MC_SUMMARY);
    let summary = if report.simulation.is_some() && path.exists() {
        let text = fs::read_to_string(&path).map_err(io_error(&path))?;
        Some(
            serde_json::from_str::<McSummary>(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        )
    } else {
        None
    };
    Ok(crate::emit_report(&report, summary.as_ref()))
}
