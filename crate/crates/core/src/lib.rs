//! Split-sample inference on data-dependent model properties.
//!
//! Models are trained on the complement of each evaluation subset and a
//! moment condition is solved on the held-out rows. The crate provides the
//! estimators, sandwich-variance confidence intervals, model-comparison tests,
//! an adaptive interval for degenerate moments, a p-value reproducibility
//! measure, ensemble GATES and a Monte-Carlo harness.

// Negated comparisons such as `!(x > 0.0)` also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod cli;
pub mod compare;
pub mod data;
pub mod error;
pub mod gates;
pub mod inference;
pub mod learners;
pub mod linalg;
pub mod moments;
pub mod repro;
pub mod rng;
pub mod sim;
pub mod splits;
pub mod stats;
pub mod zestim;

pub use error::{Error, Result};
