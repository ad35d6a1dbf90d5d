//! Dense CPU tensors with the handful of operations a U-Net / ConvLSTM
//! stack needs, plus a small reverse-mode autodiff engine.
//!
//! Tensors are contiguous, row-major, channel-major (`[B, C, H, W]`) and
//! generic over `f32` / `f64`.

pub mod autograd;
mod error;
mod float;
pub mod kernels;
pub mod ops;
mod tensor;

pub use autograd::{Gradients, Var};
pub use error::{Result, TensorError};
pub use float::Float;
pub use tensor::Tensor;
