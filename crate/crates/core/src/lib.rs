//! Building blocks for strong metric-learning baselines: a small autodiff
//! engine, a configurable CNN with batch-norm necks, identity and metric
//! losses, training tricks, and retrieval evaluation.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
