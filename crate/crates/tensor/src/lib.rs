//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are row-major n-dimensional float arrays that record the ops
//! applied to them; calling [`Tensor::backward`] on a scalar walks the
//! recorded graph in reverse topological order and accumulates gradients
//! into every reachable tensor that requires them. Per-element gradient
//! hooks ([`Tensor::attach_grad_hook`]) rescale the gradient flowing into
//! one tensor without touching its forward value.
//!
//! The element type is generic over [`Scalar`] (`f32` or `f64`); the
//! [`Tensor64`]/[`Tensor32`] aliases pin it.

mod backward;
mod error;
mod ops;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Double-precision tensor, the default for model work.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
