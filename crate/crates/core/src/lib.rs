//! Numerical core of the NxtPost user-to-post recommender.
//!
//! Everything in this crate is pure computation over `alloc` buffers: the
//! causal transformer user tower with hand-written backpropagation, the
//! scaled in-batch-negative cross-entropy objectives, retrieval metrics,
//! multi-channel post fusion and the Adam optimizer. IO, data generation and
//! orchestration live in the `nxtpost` crate.

#![no_std]

extern crate alloc;

pub mod baseline;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod sequence;

pub use error::{Error, Result};
pub use sequence::{ActionType, EmbeddingLookup, HistoryEvent, SequenceSample, Surface, TargetEvent};
