//! Data-driven predictive control of continuous-time linear plants whose
//! dynamics are unknown: the plant matrices are learned online from
//! integral-window regressions and fed to a Taylor-series receding-horizon
//! controller with a closed-form solution.

// Negated float comparisons deliberately treat NaN as invalid input.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod predictor;
pub mod simulator;

pub use error::{Error, Result};
