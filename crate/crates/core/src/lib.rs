//! Structural equation modeling for high-frequency observations of
//! jump-diffusion processes.
//!
//! The pipeline: simulate or load a panel ([`sim`]), filter jumps and
//! estimate the continuous covariance ([`threshold`]), fit a parametric
//! covariance structure ([`model`], [`qmle`]) and test its fit ([`gof`]).
//! [`montecarlo`] repeats all of that over many replications.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod gof;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod presets;
pub mod qmle;
pub mod sim;
pub mod threshold;

pub use error::{Error, Result};
