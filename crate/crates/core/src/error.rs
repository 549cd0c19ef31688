use thiserror::Error;

use crate::ics::IterationRecord;

/// Errors raised by the steering toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("numerical failure while discretizing step {step}")]
    NumericalFailure { step: usize },

    #[error("mean propagation diverged at step {step}")]
    Divergence { step: usize },

    #[error("internal inconsistency: {0}")]
    Internal(String),

    #[error(transparent)]
    Conic(#[from] icsteer_conic::ConicError),

    #[error("subproblem at iteration {iteration} ended with status {status}")]
    Subproblem {
        iteration: usize,
        status: icsteer_conic::Status,
        history: Vec<IterationRecord>,
    },

    #[error("no convergence after {} iterations", history.len())]
    NotConverged { history: Vec<IterationRecord> },

    #[error("{divergent} of {trials} Monte Carlo trials diverged")]
    SimulationDiverged { divergent: usize, trials: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
