//! Ergodic per-user rates of cooperative multi-cell MIMO downlinks under
//! fairness scheduling, computed in the large-system limit and checked
//! against a finite-dimensional Monte Carlo oracle.

// `!(x > 0.0)` deliberately treats NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod fairness;
pub mod fmt;
pub mod geometry;
pub mod limit;
pub mod montecarlo;

pub use error::{Error, Result};
