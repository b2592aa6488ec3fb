//! Conditional-GAN segmentation of endoscopy-style images.
//!
//! An encoder-decoder generator maps an RGB image to a single-channel mask;
//! a patch discriminator scores `(image, mask)` pairs; both are trained
//! adversarially with Adam. The crate also ships the dataset pipeline, a
//! synthetic dataset generator, segmentation metrics, and a CLI.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod networks;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
