//! Warped gradient descent.
//!
//! Task-learners are built with meta-learned *warp-layers* interleaved between
//! their own layers. Backpropagating through the warp-layers preconditions the
//! task gradient; the warp parameters are trained across tasks with
//! trajectory-agnostic meta-objectives.

pub mod autodiff;
pub mod error;
pub mod meta;
pub mod network;
pub mod objective;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
