//! Laplace-seeded variational Gaussian posteriors for non-conjugate models.
//!
//! The pipeline is: build a [`models::LogDensity`], find its mode and the
//! Laplace Gaussian ([`laplace`]), initialise one of the variational families
//! from it and maximise a fixed-sample Monte Carlo lower bound
//! ([`variational`]), then score held-out data ([`evaluate`]).

// Index loops mirror the matrix algebra; `!(a > b)` comparisons deliberately
// treat NaN as failing.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluate;
pub mod experiments;
pub mod laplace;
pub mod models;
pub mod optimize;
pub mod serde_matrix;
pub mod stats;
pub mod variational;
pub mod util;

pub use error::{Error, Result};
