//! Two-stage joint source-channel coding for MIMO CSI feedback.
//!
//! Stage 1 is an SNR-adaptive convolutional autoencoder with nested (MRL)
//! latent rates, optional mu-law quantization and an AWGN or Rayleigh-MRC
//! feedback link. Stage 2 refines the coarse reconstruction with a small
//! U-Net trained as a residual diffusion model. Everything is generic over
//! `f32`/`f64` through [`Scalar`]; the aliases below fix the precision.

pub mod autoencoder;
pub mod checkpoint;
pub mod channel;
pub mod config;
pub mod csi_data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod quantizer;
pub mod scalar;
pub mod tensor;

pub use error::{Error, LoadError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Autoencoder32 = autoencoder::Autoencoder<f32>;
pub type Autoencoder64 = autoencoder::Autoencoder<f64>;
pub type Denoiser32 = diffusion::Denoiser<f32>;
pub type Denoiser64 = diffusion::Denoiser<f64>;
pub type CsiDataset32 = csi_data::CsiDataset<f32>;
pub type CsiDataset64 = csi_data::CsiDataset<f64>;
