//! Federated stochastic optimization under the ABC variance condition.
//!
//! The crate provides smooth objective families with exact constants,
//! stochastic gradient oracles with verifiable noise, heterogeneity measures
//! (`sigma_f*`, BGD constants, drift at the optimum), FedAvg and SCAFFOLD
//! rounds with theory-driven stepsizes, and a deterministic experiment
//! harness.

pub mod algorithms;
pub mod error;
pub mod harness;
pub mod heterogeneity;
pub mod objectives;
pub mod oracles;
pub mod problems;
pub mod rng;
pub mod stepsize;

pub use error::{Error, Result};
pub use objectives::{FederatedProblem, Objective};
pub use oracles::GradientOracle;
pub use rng::NoiseStream;
