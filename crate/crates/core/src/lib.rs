//! Exact and misspecified Wonham filters for finite-state Markov chains
//! observed in Gaussian white noise, their derivatives with respect to the
//! initial law, and Monte Carlo checks of the stability and robustness bounds
//! that control them.

pub mod constants;
pub mod error;
pub mod filter;
pub mod lab;
pub mod model;
pub mod sensitivity;
pub mod signal;
pub mod tolerance;

pub use error::{Error, Result};
pub use model::{GeneratorMatrix, Model, ModelPair, ObservationMap, SimplexPoint, TangentVector};
