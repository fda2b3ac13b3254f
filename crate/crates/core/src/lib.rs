//! Model-compression toolkit: diagonal-Fisher filter sensitivity, conditional
//! accuracy-bounded structural pruning, and robust INT8 post-training
//! quantization, with a benchmark harness for comparing the methods.
//!
//! The flow mirrors a two-stage functional composition: a trained float model
//! is structurally pruned under a hard accuracy-drop bound, and the maximal
//! accepted sparse model is then quantized to 8-bit integers using
//! KL-calibrated activation ranges.

pub mod bench;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod graph;
pub mod pipeline;
pub mod pruning;
pub mod quant;
pub mod report;
pub mod sensitivity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
