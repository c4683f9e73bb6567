//! Learning when to stop reading a sequence and classify it.
//!
//! A recurrent model emits, at every step, a class distribution and a
//! wait/stop distribution. Three trainers are provided:
//!
//! - [`cis`]: supervised stop labels induced from the model's own
//!   per-step rewards.
//! - [`larm`]: a differentiable expected loss over the stop-time
//!   distribution.
//! - [`ppo`]: clipped policy-gradient updates on sampled rollouts.
//!
//! [`eval`] turns trained models into (mean stopping step, accuracy)
//! points and compares methods through the area under their Pareto
//! frontiers.

// `!(x > 0.0)` style guards deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cis;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod larm;
pub mod model;
pub mod ppo;
pub mod reward;
pub mod train;

pub use error::{Error, Result};
