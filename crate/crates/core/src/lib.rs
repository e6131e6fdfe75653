//! Content-popularity learning for edge caches: a Poisson regressor over a
//! Gaussian process with two inference backends (Hamiltonian Monte Carlo and
//! mean-field variational Bayes), posterior-predictive popularity forecasts
//! for seen and unseen contents, and cache-hit-ratio placement evaluation on
//! synthetic and MovieLens-derived workloads.

// Validation deliberately writes `!(x > 0.0)` so that NaN fails the check;
// `x <= 0.0` would wave NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod datagen;
pub mod error;
pub mod hmc;
pub mod ingest;
pub mod kernel;
pub mod posterior;
pub mod predict;
pub mod vb;

pub use error::{Error, Result};
