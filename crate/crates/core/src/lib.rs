//! Fidelity-based evaluation of explanation methods for neural machine
//! translation.
//!
//! The crate trains small NMT models, extracts per-decision word relevance
//! with four explanation methods, turns the top-k relevant words into
//! generalized rule datasets, fits proxy models on those rules, and scores
//! each explanation method by the best proxy perplexity. Supporting analyses
//! (rule density, bootstrap ranking stability, k and sample-size sweeps,
//! alignment error rate) live behind the same library surface as the CLI.

pub mod error;
pub mod explain;
pub mod nmt;
pub mod rules;
pub mod tensor;

pub use error::{Error, Result};
