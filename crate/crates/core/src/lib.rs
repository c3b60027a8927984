//! Estimators and diagnostics for feature-conditioned, time-inhomogeneous
//! Markov transition operators.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs plus an explicit seed; file formats, configuration
//! and the command-line driver live in the `inhomarkov` companion crate.
//!
//! Pipeline, bottom-up:
//!
//! * [`ingest`]: returns, feature alignment, train-only standardization,
//!   mutual-information ranking, chronological splits, realized variance.
//! * [`discretization`]: quantile bins, Markov states, forward-return and
//!   state-to-state labels.
//! * [`counts`]: empirical count matrices and the classical baselines.
//! * [`nn`]: a small MLP engine (GELU, dropout, softmax cross-entropy, Adam).
//! * [`operator`]: row-wise operator estimators built on the network.
//! * [`diagnostics`]: row heterogeneity, entropy, Dobrushin coefficient,
//!   Chapman-Kolmogorov composition, regime stratification.
//! * [`evaluation`]: NLL, calibration, block bootstrap, Welch tests.
//! * [`synthetic`]: a ground-truth regime-switching chain for verification.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod counts;
pub mod diagnostics;
pub mod discretization;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod matrix;
pub mod nn;
pub mod operator;
pub mod special;
pub mod synthetic;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
