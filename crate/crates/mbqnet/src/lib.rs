//! Multi-bit quantization-aware training with shared batch normalization and
//! bit-wise coreset sampling.

pub mod checkpoint;
pub mod config;
pub mod coreset;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod quant;
pub mod scoring;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
