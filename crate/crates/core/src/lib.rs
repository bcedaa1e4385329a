//! LSTM-driven spatial transformer network for cluttered multi-digit
//! recognition, implemented from scratch with explicit backward passes.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, GEMM, the seeded generator.
//! * [`layers`]: convolution, pooling, dense, dropout, softmax cross-entropy.
//! * [`stn`]: affine grid generation and bilinear sampling with gradients.
//! * [`localization`]: conv feature extractor + LSTM + affine head.
//! * [`downsample`]: box-average resolution reduction.
//! * [`dataset`]: IDX parsing, cluttered canvas synthesis, the `SQMN` container.
//! * [`models`]: LSTM-STN-CNN, FFN-STN-CNN and plain CNN assemblies.
//! * [`train`]: momentum SGD, checkpoints, metrics and the command implementations.

pub mod dataset;
pub mod downsample;
pub mod error;
pub mod layers;
pub mod localization;
pub mod models;
pub mod pgm;
pub mod stn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
