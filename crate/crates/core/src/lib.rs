//! Sparse recovery from one-bit measurements taken through a randomly
//! perturbed sensing matrix.
//!
//! [`pipeline::run_bht_mle`] alternates per-coordinate Bayesian hypothesis
//! tests for the support ([`detector`]) with a maximum-likelihood amplitude
//! fit on the detected coordinates ([`estimator`]).
//! [`pipeline::run_mle_baseline`] is the same ML fit over all coordinates.
//! [`bench`] runs seeded Monte Carlo comparisons and writes CSV/JSON tables.

pub mod bench;
pub mod detector;
pub mod error;
pub mod estimator;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod selftest;

pub use error::{Error, Result};
