//! Quantization simulation primitives for transformer activations and
//! weights: dense tensors, the uniform affine quantizer at per-tensor,
//! per-embedding, and per-embedding-group granularity, static range
//! estimators, integer matmul kernels with rescale accounting, and the
//! per-tensor rewrite of grouped FFN blocks.

pub mod error;
pub mod estimators;
pub mod kernels;
pub mod math;
pub mod peg;
pub mod quant;
pub mod tensor;

pub use error::{CoreError, Result};
pub use quant::{
    dequantize, fake_quantize, quantize, quantize_with, GranularParams, Granularity, QParams,
    QTensor,
};
pub use tensor::{Shape, TensorF};
