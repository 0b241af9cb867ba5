//! Lipschitz-continuous shift-transformer classifier with certified l2 robustness.
//!
//! The library composes a zoo of Lipschitz-bounded layers (CenterNorm, MaxMin,
//! partial channel shift, residual 1x1 convolutions, average pooling, a
//! normalized prediction head) into a staged classifier, trains it with a
//! margin loss driven by the model's own Lipschitz bound, and certifies
//! per-sample l2 robustness from that bound.
//!
//! Core math is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`). Tests and numerical oracles run in `f64`; the CLI and
//! checkpoint format use `f32`.

pub mod attack;
pub mod certify;
pub mod check;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Release-path tensor (matches the checkpoint on-disk precision).
pub type Tensor32 = Tensor<f32>;
/// Oracle/test-build tensor.
pub type Tensor64 = Tensor<f64>;

/// Release-path model.
pub type Model32 = model::LipShiFTModel<f32>;
/// Oracle/test-build model.
pub type Model64 = model::LipShiFTModel<f64>;
