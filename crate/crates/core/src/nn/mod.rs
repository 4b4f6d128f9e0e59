//! Minimal convolutional building blocks with hand-written gradients.

pub mod layers;
pub mod tensor;

pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2x2, Param};
pub use tensor::Tensor;
