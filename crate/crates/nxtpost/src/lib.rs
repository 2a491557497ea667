//! Synthetic data, training, evaluation, experiments and a serving
//! simulation for the NxtPost user tower, with file formats and a CLI.

pub mod cli;
pub mod coldstart;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod manifest;
pub mod post_encoder;
pub mod seed;
pub mod serving;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
