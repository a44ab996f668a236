//! Residual diffusion for single-image super-resolution.
//!
//! A small CNN ([`simplesr`]) predicts the low-frequency content of the HR
//! image; a conditional DDPM ([`diffusion`]) then generates the residual
//! between the ground truth and that prediction. The denoiser sees the
//! CNN output split into frequency bands ([`splitter`]) and attends to its
//! wavelet details on every skip connection ([`unet`]).
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod freq;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod resample;
pub mod rng;
pub mod scalar;
pub mod simplesr;
pub mod splitter;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use image::Image;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SimpleSr32 = simplesr::SimpleSr<f32>;
pub type Denoiser32 = diffusion::Denoiser<f32>;
pub type PatchDataset32 = data::PatchDataset<f32>;
pub type InitialPredictor32 = baselines::InitialPredictor<f32>;
