//! Text-to-pose sequence production: a trainable encoder-decoder that
//! translates symbolic sentences into variable-length continuous
//! multi-joint pose trajectories, with counter-based end-of-sequence
//! decoding, anti-drift data augmentation, conditional adversarial
//! training, mixture-density output heads, and a back-translation
//! evaluation stack.
//!
//! Numerics are generic over the scalar type (`f32`/`f64`); gradient
//! verification runs in double precision, training defaults to single.

pub mod adversarial;
pub mod autodiff;
pub mod data;
pub mod eval;
pub mod mdn;
pub mod model;
pub mod scalar;
pub mod train;
pub mod verify;

pub use scalar::Scalar;

/// Double-precision tensor, used by gradient checks.
pub type Tensor64 = autodiff::Tensor<f64>;
/// Single-precision tensor, the training default.
pub type Tensor32 = autodiff::Tensor<f32>;
/// Double-precision computation graph.
pub type Graph64 = autodiff::Graph<f64>;
/// Single-precision computation graph.
pub type Graph32 = autodiff::Graph<f32>;
