//! Minimal dense kernels: GEMM-backed convolution, normalization, bilinear
//! resampling and attention, each with a hand-written backward pass.

pub mod conv;
pub mod norm;
pub mod ops;
pub mod params;
mod real;
mod tensor;
pub mod upsample;

pub use params::{Param, ParamStore};
pub use real::Real;
pub use tensor::Tensor4;
