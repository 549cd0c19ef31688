use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icsteer_cli::run::{self, SimOverrides};
use icsteer_cli::{parse_config, CliError, RunConfig};

/// Chance-constrained covariance steering for nonlinear stochastic systems.
#[derive(Parser)]
#[command(name = "icsteer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for a feedback policy and write it to the run directory.
    Solve {
        config: PathBuf,
        /// Run directory; overrides `output_dir` in the config.
        #[arg(long, env = "ICSTEER_OUTPUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Monte Carlo validation of a stored policy.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "ICSTEER_OUTPUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Print the summary of a run directory.
    Report { rundir: PathBuf },
}

fn load(path: &PathBuf) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    parse_config(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { config, out } => {
            let cfg = load(&config)?;
            let dir = run::output_dir(&cfg, out.as_deref());
            let report = run::solve(&cfg, &dir)?;
            print!("{}", icsteer_cli::emit_report(&report, None));
        }
        Command::Simulate {
            config,
            policy,
            trials,
            seed,
            out,
        } => {
            let cfg = load(&config)?;
            let dir = run::output_dir(&cfg, out.as_deref());
            run::simulate(&cfg, &policy, SimOverrides { trials, seed }, &dir)?;
            print!("{}", run::report(&dir)?);
        }
        Command::Report { rundir } => print!("{}", run::report(&rundir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("icsteer: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
