//! Causal, budget-aware audio-visual active speaker detection for a
//! tabletop device with a 360° camera and a circular microphone array.
//!
//! The crate covers feature extraction, the spatial-query fusion network
//! and its training, streaming inference under a compute budget, a
//! synthetic meeting simulator and the evaluation harness.

pub mod audio;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod query;
pub mod scalar;
pub mod sim;
pub mod streaming;
pub mod tensor;
pub mod visual;

pub use error::{AsdError, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type AsdModel32 = model::AsdModel<f32>;
pub type AsdModel64 = model::AsdModel<f64>;
pub type Pipeline64 = streaming::StreamingPipeline<f64>;
