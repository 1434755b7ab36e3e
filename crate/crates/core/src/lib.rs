//! Precipitation nowcasting with distribution-centric tokenization.
//!
//! Patch embeddings are reordered by their historical precipitation, grouped
//! into contiguous blocks of similar rainfall, and processed by a transformer
//! whose attention draws keys and values from the group embeddings. The crate
//! carries its own small reverse-mode tensor core, a synthetic long-tailed
//! weather generator, verification metrics and a training loop.

pub mod ablation;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod hyag;
pub mod metok;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod posembed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
