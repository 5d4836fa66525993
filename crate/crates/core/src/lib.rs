//! CPU inference engine for deep-encoder / shallow-decoder transformer
//! translation models, with an int8 GEMM path, length-sorted dynamic
//! batching, greedy search and a chunked parallel text pipeline.

pub mod batch;
pub mod engine;
pub mod error;
pub mod model;
pub mod quant;
pub mod scalar;
pub mod search;
pub mod store;
pub mod tensor;
pub mod text;

pub use error::{Error, LoadError, Result};
pub use model::{DecodeCache, EncoderOutput, Model, ModelConfig, NormVariant, Precision};
pub use quant::{PackedMatrix, QuantizedActivations, QuantizedMatrix};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Vocabulary index.
pub type TokenId = u32;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
