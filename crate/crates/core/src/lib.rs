//! Phase-space solver for the spatially inhomogeneous Boltzmann equation with
//! soft potentials and integrable angular kernels, together with numerical
//! checks of its barrier, regularity and stability estimates.

pub mod analysis;
pub mod barriers;
pub mod cli;
pub mod collision;
pub mod error;
pub mod kernel;
pub mod phase;
pub mod quad;
pub mod solver;

pub use error::{KbError, Result};
