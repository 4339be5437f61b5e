//! Bias-mitigation toolkit for classifiers over fixed representations.
//!
//! Covers balanced training (instance reweighting and down-sampling), a
//! demographic-gated model with soft and Bayesian gating at inference time,
//! iterative nullspace projection, and the separation-based fairness metrics
//! used to compare them.

pub mod balance;
pub mod data;
pub mod inlp;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod train;
pub mod tuning;

pub use error::{Error, Result};
