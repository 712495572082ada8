//! Simulation and bound-checking toolkit for federated averaging under
//! heterogeneous objectives.
//!
//! The crate generates federated problems (quadratics and logistic
//! regression), measures their smoothness and heterogeneity constants, runs
//! FedAvg and its variants with deterministic per-lane randomness, and
//! evaluates convergence bounds against the traces.

pub mod algorithms;
pub mod bounds;
pub mod error;
pub mod harness;
pub mod heterogeneity;
pub mod numkit;
pub mod problems;

pub use error::{Error, Result};
