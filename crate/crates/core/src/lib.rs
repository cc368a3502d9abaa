//! Rank pretrained visual representations for robot control without policy
//! rollouts: train linear state-prediction probes on exported feature maps,
//! aggregate per-state scores into a proxy score, and measure how well the
//! proxy ranks backbones against policy success rates.

// NaN must fail range checks, so negated comparisons are deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blob;
pub mod cli;
pub mod error;
pub mod pooling;
pub mod probe;
pub mod probedata;
pub mod ranking;
pub mod scoring;
pub mod statevec;
pub mod synthgen;

pub use error::{Error, Result};
