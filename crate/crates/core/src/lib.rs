//! Incomplete multimodal semantic segmentation: a shared encoder, semantic
//! guided fusion over any subset of modalities, modality-aware sampling during
//! training, metrics over every modality subset and diagnostics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod autograd;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head_loss;
pub mod mas;
pub mod model;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod sgf;
pub mod tensor;
pub mod train;

pub use config::{Config, Variant};
pub use error::{Error, Result};
pub use mas::Mode;
pub use model::Model;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
pub type Checkpoint64 = train::Checkpoint<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
