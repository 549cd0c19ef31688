//! Chance-constrained covariance steering for nonlinear stochastic systems
//! by successive convexification.
//!
//! The pipeline is [`lindisc`] (linearize and discretize about a reference),
//! [`blocks`] (stacked linear system), [`problem`] (conic subproblem), [`ics`]
//! (outer loop) and [`montecarlo`] (closed-loop validation).

pub mod blocks;
mod error;
pub mod ics;
pub mod lindisc;
pub mod model;
pub mod montecarlo;
pub mod problem;

pub use error::{Error, Result};
