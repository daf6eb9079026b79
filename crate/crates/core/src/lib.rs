//! Introspection toolkit for autoregressive robot policies.
//!
//! Per-token probability records become uncertainty features; compact
//! transformer classifiers (trained from step labels or from episode
//! outcomes) and split-conformal thresholds turn those features into
//! "request help" triggers; an evaluation harness scores every method with
//! fold-wise classification and timing metrics.

pub mod conformal;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod monitor;
pub mod rollout;

pub use error::{Error, Result};
