//! Sliding-window GNSS/odometry fusion with self-tuning Gaussian-mixture
//! error models.
//!
//! The library estimates a vehicle trajectory (position, heading, receiver
//! clock) from pseudoranges and wheel odometry by nonlinear least squares
//! over a sliding window of states. Pseudorange errors are modelled by a
//! Gaussian mixture embedded exactly into the least-squares cost
//! (Sum-Mixture), and the mixture itself is learned online from the
//! residuals: variational Bayesian inference fits the component parameters
//! while a complexity-learning loop adds one probe component per epoch and
//! prunes the ones whose weight collapses.
//!
//! Module map:
//!
//! - [`model`]: states, measurements, timestamps, the sliding window.
//! - [`mixture`]: Gaussian mixtures, EM, variational inference, complexity learning.
//! - [`robust`]: error models mapping a raw residual to a least-squares residual.
//! - [`factors`]: pseudorange, odometry, clock-drift and prior residuals.
//! - [`solver`]: Levenberg-Marquardt over the window.
//! - [`pipeline`]: the online estimator and its baseline configurations.
//! - [`sim`] and [`stream`]: synthetic urban scenarios and the record file format.
//! - [`eval`]: absolute trajectory error and comparison tables.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod factors;
pub mod mixture;
pub mod model;
pub mod pipeline;
pub mod robust;
pub mod sim;
pub mod solver;
pub mod stream;

mod banded;

pub use error::{Error, Result};
