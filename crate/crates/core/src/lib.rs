//! Online sketched Newton method with a batch-free covariance estimator.
//!
//! The crate is organized around the pieces of one inference pipeline:
//!
//! - [`problems`]: stochastic objectives (linear / logistic regression, noisy
//!   deterministic oracles) with known ground truth.
//! - [`sketch`]: sketching distributions and the sketch-and-project inner
//!   solver for the Newton system.
//! - [`optimizer`]: the outer iteration with Hessian averaging and a banded
//!   random stepsize.
//! - [`covariance`]: the weighted sample covariance (WSC) estimator, its
//!   online inverse, and the plug-in / batch-means baselines.
//! - [`inference`]: quantiles, confidence intervals and regions.
//! - [`oracle`]: exact limiting covariance for the built-in problems.
//! - [`sqp`]: the equality-constrained primal-dual variant.
//! - [`experiment`]: config parsing, Monte-Carlo replication harness, CSV
//!   output and slope fitting used by the `snewt` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod linalg;
pub mod optimizer;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod sketch;
pub mod sqp;

pub use error::{Error, Result};
