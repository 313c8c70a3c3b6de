//! A small CPU tensor engine with tape-based reverse-mode autodiff.
//!
//! Covers what convolutional encoder/decoder and U-Net style networks need:
//! convolution via im2col + GEMM, group norm, SiLU, nearest upsampling,
//! average pooling, channel concat/slice and a handful of losses. Every op
//! is generic over [`Real`] so the same model code runs in `f32` for
//! training and `f64` for finite-difference checks.

mod kernels;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, ema_update, Adam};
pub use params::{Bound, Conv2d, GroupNorm, Linear, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
