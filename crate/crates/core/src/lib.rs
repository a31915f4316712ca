//! Kernel optimal matching weights for generalized average treatment effects.
//!
//! The crate covers the data model and estimand catalog, kernel Gram
//! construction, Gaussian-process hyperparameter tuning, a dense convex QP
//! solver, the KOM weight programs, classical weighting baselines, effect
//! estimation with standard errors, and a Monte Carlo harness.

pub mod baselines;
pub mod data;
pub mod estimate;
pub mod error;
pub mod gp_tune;
pub mod kernels;
pub mod kom;
pub mod linalg;
pub mod qp;
pub mod simulation;

pub use data::{Dataset, EstimandKind, EstimandSpec, Normalization, TargetWeights};
pub use error::{Error, Result};
pub use kernels::{KernelConfig, KernelFamily};
