//! Single-image shadow removal.
//!
//! The pipeline is a conditional GAN: a generator built from transposed
//! channel attention blocks, a two-wheel directional-recurrence spatial
//! attention stage, and Fourier-domain residual blocks predicts a negative
//! residual that brightens shadowed pixels; a patch discriminator scores
//! (input, candidate) pairs. Everything runs on a small reverse-mode tensor
//! tape in `f32` on the CPU. Evaluation follows the LAB-space region-aware
//! protocol (RMSE / SSIM / PSNR over whole image, shadow, and non-shadow
//! regions).

pub mod blocks;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod twrnn;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
