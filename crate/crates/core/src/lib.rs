//! Pseudospectral solver for the periodic Benjamin equation and a numerical
//! laboratory for the I-method: smoothing multiplier, modified energies,
//! multiplier hierarchy and their almost-conservation along solved
//! trajectories.

pub mod bourgain;
pub mod energies;
pub mod harness;
pub mod error;
pub mod imethod;
pub mod multipliers;
pub mod report;
pub mod solver;
pub mod spectral;

pub use error::{Error, Result};
