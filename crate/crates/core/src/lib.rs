//! Numerical laboratory for a singular controlled diffusion on the circle.
//!
//! The crate covers the density layer on the discretized torus, entropy and
//! Fisher-information functionals with the associated Hamiltonians, a
//! regularized finite-volume solver for `rho_t = 1/2 (log rho)_xx + eta_x`,
//! deterministic optimal control on top of that solver, a two-velocity
//! kinetic model (mean-field and stochastic particles), and the effective
//! Hamiltonian of the one-dimensional cell problem.

pub mod cell;
pub mod control;
pub mod diffusion;
pub mod error;
pub mod functionals;
pub mod io;
pub mod linalg;
pub mod particles;
pub mod seed;
pub mod torus;

pub use error::{Error, Result};
