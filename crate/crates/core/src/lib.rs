//! SegTransVAE: volumetric segmentation with a CNN encoder, a transformer
//! bottleneck, a CNN decoder and a VAE reconstruction branch, built on a
//! small reverse-mode differentiation core.
//!
//! Module map:
//! - [`tensor`]: tensors, tape autodiff, kernels, seeded RNG, gradient checks
//! - [`nn`]: parameter store and layers
//! - [`model`]: architecture assembly and complexity accounting
//! - [`loss`]: soft Dice, reconstruction, KL and the weighted total
//! - [`metrics`]: hard Dice and HD95
//! - [`data`]: synthetic volumes, preprocessing and the SVV1 file format
//! - [`train`]: Adam, learning-rate schedule, training loop, checkpoints

pub mod data;
pub mod error;
mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Gradients, Init, ResampleMode, Rng, Tape, Tensor, Var};
