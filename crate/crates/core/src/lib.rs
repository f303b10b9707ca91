//! Multi-scale raw-waveform speaker embeddings.

pub mod aggregator;
pub mod analysis;
pub mod audio;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
