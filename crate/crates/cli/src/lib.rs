//! Experiment runner for warped gradient descent: configs, orchestration,
//! metrics, checkpoints and the gradient-check suite.

pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod run;

pub use error::{HarnessError, Result};
