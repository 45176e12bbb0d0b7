//! Noise-conditional image denoising with a FiLM-modulated U-Net.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`], [`ops`]), the Poisson-Gaussian noise model ([`noise`]), the
//! conditioned network and its checkpoint format ([`model`]), training and
//! validation loops ([`train`]), and PSNR/SSIM ([`metrics`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used for training and inference.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod ops;
pub mod optim;
pub mod param;
pub mod patches;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training and inference precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = tensor::Tensor<f64>;
pub type FilmUnet32 = model::FilmUnet<f32>;
pub type FilmUnet64 = model::FilmUnet<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
