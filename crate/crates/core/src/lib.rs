//! Closed-loop identification of basal insulin doses for virtual patients.
//!
//! The pipeline simulates pump treatment on a stochastic four-state
//! glucose-insulin model, identifies `(p4, p6, p7)` by maximum likelihood
//! with a continuous-discrete extended Kalman filter, computes the daily
//! basal dose that brings glucose to target and then simulates daily
//! long-acting injections with that dose.
//!
//! The data-generating model has the same structure as the model being
//! identified, so estimation runs under a correctly specified model.

// Negated comparisons such as `!(x > 0.0)` are used on purpose: they also
// reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cohort;
pub mod error;
pub mod estimate;
pub mod model;
pub mod scenario;
pub mod simulate;

pub use error::{Error, Result};
