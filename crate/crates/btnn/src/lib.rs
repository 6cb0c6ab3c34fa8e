//! Streaming custom keyword spotting.
//!
//! The pipeline: log-mel filterbank features feed a shared embedding network
//! whose output is scored by one small binary "tail" classifier per acoustic
//! state.  Raw tail scores are mapped to calibrated confidences through
//! empirical boundary tables, fused across the positive and negative score
//! distributions, and consumed by a token-passing search over per-keyword
//! chain graphs.  Only the states the search currently needs are evaluated,
//! which is where the computation saving over a monolithic classifier comes
//! from.

pub mod calibration;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod nnet;
mod parallel;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
