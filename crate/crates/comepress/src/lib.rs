//! Depth compression for small decoder-only transformers.
//!
//! The pipeline: pretrain a toy model, score layer redundancy (block-influence
//! cosine metrics) and channel importance (activation-weighted weight norms),
//! shrink the stack by concatenation-based layer merging or one of the
//! baseline pruners, then recover quality with feature-level distillation
//! against the original model. Everything is deterministic under a seed.

pub mod cli;
pub mod error;
pub mod eval;
pub mod merging;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use cli::run;
pub use error::{Error, Result};
