//! Density-map object counting with adversarial domain adaptation.
//!
//! A U-Net style encoder/decoder regresses a density map whose sum is the
//! object count. A domain classifier attached to the bottleneck through a
//! gradient reversal layer pushes the encoder towards features that do not
//! tell labelled source images from unlabelled target images.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod checkpoint;
pub mod datasets;
pub mod density;
pub mod error;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod scalar;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CountingModelF32 = network::CountingModel<f32>;
pub type CountingModelF64 = network::CountingModel<f64>;
pub type TensorF32 = nn::Tensor<f32>;
pub type TensorF64 = nn::Tensor<f64>;
pub type TrainStateF32 = trainer::TrainState<f32>;
pub type TrainStateF64 = trainer::TrainState<f64>;
pub type CheckpointF32 = checkpoint::Checkpoint<f32>;
pub type CheckpointF64 = checkpoint::Checkpoint<f64>;
