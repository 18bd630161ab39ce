//! Linear-quadratic-Gaussian mean-field games with state and control delay.
//!
//! The crate works on a uniform grid whose step divides the horizon and both
//! delays. Every solver shares one explicit discretization, so the exact
//! scenario-tree oracle, the deterministic mean solvers and the Monte Carlo
//! simulator can be compared to round-off rather than to discretization
//! error.

pub mod det_solvers;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod nce;
pub mod oracle;
pub mod population_sim;
pub mod rng;
pub mod strategies;
pub mod timegrid;

pub use error::{Error, Result};
pub use model::{ModelFile, ModelSpec, ScalarModel};
pub use timegrid::{build_grid, DelayedPath, PathRole, TimeGrid};
