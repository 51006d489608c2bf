//! TransNEST: transfer learning of network feature embeddings across two
//! sites with partially overlapping feature sets, group priors, and
//! structured missingness.

pub mod benchmarks;
pub mod catalog;
pub mod cli;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod simgen;

pub use error::{Error, Result};
