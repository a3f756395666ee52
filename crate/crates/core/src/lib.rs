//! Perception-aware learned image compression benchmark.
//!
//! A GAN autoencoder with quantization in the loop, fixed-rate bitstreams,
//! standard-codec baselines, distortion metrics (PSNR / SSIM / MS-SSIM), a
//! semantic-segmentation harness with retraining strategies, and a sweep
//! runner producing rate-distortion-perception tables and plots.

pub mod baselines;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod quant;
pub mod runner;
pub mod segmentation;
pub mod train;

pub use error::{Error, Result};
