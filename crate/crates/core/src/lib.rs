//! Pedestrian trajectory prediction at desk scale.
//!
//! The pipeline runs from raw scenarios to evaluated predictions:
//!
//! - [`scene`]: scenario data model, JSON-lines I/O and a synthetic generator.
//! - [`benchmark`]: sliding-window sampling, track relabeling and splits.
//! - [`features`]: agent-centric social (8x21) and map (100x6) matrices.
//! - [`tensor`]: a small tape-based reverse-mode autodiff core.
//! - [`model`]: the attention encoders and convolutional decoder.
//! - [`training`]: loss, Adam, plateau scheduling, augmentation and the trainer.
//! - [`eval`]: ADE/FDE, the constant-velocity baseline, sweeps and benchmarks.
//!
//! Numerical code is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient checks). Concrete aliases live below.

pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor used for training and inference.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
/// The production network.
pub type Model32 = model::Model<f32>;
/// Double-precision network, used by gradient checks.
pub type Model64 = model::Model<f64>;
pub type Trainer32<'a> = training::Trainer<'a, f32>;
