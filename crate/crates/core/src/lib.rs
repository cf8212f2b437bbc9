//! Intent-aware code comment generation.
//!
//! The crate covers the whole pipeline: corpus preprocessing, a small
//! autodiff tensor core, intent-partitioned exemplar retrieval, the
//! selective-attention encoder/decoder, an intent classifier for labeling
//! corpora, generation metrics, and training with checkpointing.

pub mod checkpoint;
pub mod coin;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod isa;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod retriever;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
