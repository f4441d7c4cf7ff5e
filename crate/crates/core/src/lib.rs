//! Alpha-channel generation for animated sticker clips.
//!
//! The pipeline couples a small frozen VAE with a latent-transparency
//! encoder/decoder pair and a layout adapter: a distilled image encoder
//! followed by a stack of temporal 3D convolutions whose output is projected
//! into the latent space as additive guidance. Training is split into three
//! stages (VAE + denoiser pre-training, teacher distillation, transparency
//! fine-tuning), each producing a deterministic checkpoint.
//!
//! Everything runs on the CPU in `f64`; checkpoints store parameters as
//! little-endian `f32`.

pub mod adapter;
pub mod autograd;
pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod latent;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod stages;
pub mod synth;
pub mod tensor;

pub use clip::FrameClip;
pub use config::{ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use latent::{LatentClip, LatentOffset};
