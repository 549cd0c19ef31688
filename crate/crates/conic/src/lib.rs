//! A self-contained first-order conic solver.
//!
//! Solves programs in the standard form
//!
//! ```text
//! minimize    cᵀx
//! subject to  Ax + s = b,   s ∈ K
//! ```
//!
//! where `K` is a Cartesian product of zero cones, nonnegative orthants,
//! second-order cones and positive semidefinite cones. The iteration is an
//! ADMM operator splitting that alternates a cached dense factorization of
//! `σI + AᵀRA` with Euclidean projections onto `K`, on Ruiz-equilibrated data.
//!
//! PSD cones are vectorized with the scaled lower-triangle convention (see
//! [`cone::svec`]) so that the Euclidean projection in vector space is exactly
//! eigenvalue clamping in matrix space.

pub mod cone;
mod equilibrate;
mod error;
pub mod program;
mod solver;

pub use cone::{project_cone, Cone};
pub use error::ConicError;
pub use program::ConicProgram;
pub use solver::{solve, solve_with_guess, ConicSolution, Residuals, Settings, Status, WarmStart};
