//! Inference engine and fault simulator for binary neural networks with
//! selective integer quantization.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod fault;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod layers;
pub mod model_io;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod toy;
pub mod transform;

pub use error::{Error, Result};
