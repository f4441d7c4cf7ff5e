//! Run configuration: model shapes, noise schedule, loss weights, and
//! per-stage training settings. Everything deserializes from one JSON file
//! with defaults for omitted fields, and the SHA-256 of the canonical JSON
//! is stamped into checkpoints for compatibility checks.

use crate::error::{Error, Result};
use crate::synth::DatasetTemplate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Layout-adapter settings (exposed in the run config; `--temporal-depth`
/// overrides the depth for ablation sweeps).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdapterConfig {
    /// Number of temporal conv blocks; 0 disables cross-frame mixing.
    pub temporal_depth: usize,
    /// Fraction of input patches zeroed during distillation.
    pub mask_ratio: f64,
    /// Group-norm group count; must divide `feature_channels`.
    pub groups: usize,
    /// Teacher/student feature channels.
    pub feature_channels: usize,
    /// Mask patch edge length in input pixels.
    pub mask_patch: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            temporal_depth: 5,
            mask_ratio: 0.75,
            groups: 8,
            feature_channels: 32,
            mask_patch: 8,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels % self.groups != 0 {
            return Err(Error::Parameter(format!(
                "groups {} must divide feature_channels {}",
                self.groups, self.feature_channels
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Parameter(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if self.mask_patch == 0 {
            return Err(Error::Parameter("mask_patch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Network widths. The spatial downsample factor is structural: both the
/// VAE encoder and the feature encoders use two stride-2 stages, so images
/// map to latents and features at 1/4 resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub vae_channels: (usize, usize),
    pub vae_decoder_channels: (usize, usize, usize),
    pub denoiser_channels: usize,
    pub time_embed_dim: usize,
    pub teacher_channels: (usize, usize, usize),
    pub student_channels: (usize, usize),
    pub tr_encoder_channels: (usize, usize),
    pub tr_decoder_channels: (usize, usize, usize),
    pub adapter: AdapterConfig,
    /// Seed for the frozen teacher's fixed random initialization.
    pub teacher_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            vae_channels: (16, 32),
            vae_decoder_channels: (32, 16, 8),
            denoiser_channels: 32,
            time_embed_dim: 16,
            teacher_channels: (48, 96, 96),
            student_channels: (12, 24),
            tr_encoder_channels: (16, 32),
            tr_decoder_channels: (32, 16, 8),
            adapter: AdapterConfig::default(),
            teacher_seed: 0x7eac_5eed,
        }
    }
}

impl ModelConfig {
    /// Image-to-latent (and image-to-feature) spatial downsample factor.
    pub const DOWNSAMPLE: usize = 4;

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Parameter("time_embed_dim must be even".into()));
        }
        if self.latent_channels == 0 {
            return Err(Error::Parameter("latent_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// A tiny configuration for fast tests: 16x16-capable widths.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 4,
            vae_channels: (6, 8),
            vae_decoder_channels: (8, 6, 6),
            denoiser_channels: 8,
            time_embed_dim: 8,
            teacher_channels: (16, 24, 24),
            student_channels: (4, 6),
            tr_encoder_channels: (4, 8),
            tr_decoder_channels: (8, 8, 8),
            adapter: AdapterConfig {
                temporal_depth: 2,
                mask_ratio: 0.75,
                groups: 2,
                feature_channels: 8,
                mask_patch: 8,
            },
            teacher_seed: 0x7eac_5eed,
        }
    }
}

/// Linear-beta noise schedule parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-3,
            beta_max: 0.1,
        }
    }
}

/// Committee weights; all default to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub w_r: f64,
    pub w_alpha: f64,
    pub w_rgb: f64,
    pub w_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_r: 1.0,
            w_alpha: 1.0,
            w_rgb: 1.0,
            w_p: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_r", self.w_r),
            ("w_alpha", self.w_alpha),
            ("w_rgb", self.w_rgb),
            ("w_p", self.w_p),
        ] {
            if w < 0.0 {
                return Err(Error::Parameter(format!("loss weight {name} is negative: {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PretrainConfig {
    pub vae_steps: usize,
    pub vae_lr: f64,
    pub vae_batch: usize,
    /// Held-out reconstruction MSE the VAE must reach; exceeding it is a
    /// non-convergence error.
    pub tau_vae: f64,
    pub denoiser_steps: usize,
    pub denoiser_lr: f64,
    pub denoiser_batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            vae_steps: 800,
            vae_lr: 2e-3,
            vae_batch: 8,
            tau_vae: 0.01,
            denoiser_steps: 400,
            denoiser_lr: 2e-3,
            denoiser_batch: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    /// Frames per step.
    pub batch: usize,
    /// Held-out distillation loss must fall below `target_ratio` times its
    /// starting value.
    pub target_ratio: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 2e-3,
            batch: 8,
            target_ratio: 0.2,
        }
    }
}

/// What the transparency encoder sees in its alpha input slot during
/// fine-tuning. Inference always feeds all-ones. `Ones` keeps training and
/// inference identical but lets the trainable transparency encoder shortcut
/// the layout adapter; `GroundTruth` trains the latent-transparency code on
/// the real matte but leaves the all-ones response uncalibrated. `Mixed`
/// flips a seeded coin per clip per step, anchoring the transparency code
/// while still calibrating the inference-time input.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaPrior {
    Ones,
    GroundTruth,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    /// Clips per step.
    pub batch_clips: usize,
    pub alpha_prior: AlphaPrior,
    /// Probability of the all-ones input per example under `Mixed`.
    pub ones_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            batch_clips: 2,
            alpha_prior: AlphaPrior::Mixed,
            ones_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    /// Manifest of the training dataset.
    pub train_manifest: PathBuf,
    /// Fraction of clips held out from training, split deterministically
    /// from the run seed.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: PathBuf::from("data/train/manifest.json"),
            holdout_fraction: 0.2,
        }
    }
}

/// Settings for the `synth` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub template: DatasetTemplate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 50,
            template: DatasetTemplate::default(),
        }
    }
}

/// Top-level run configuration. One fixed `seed` makes every stage
/// bit-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub loss_weights: LossWeights,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub checkpoint_dir: PathBuf,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        if self.schedule.steps < 1 {
            return Err(Error::Parameter("schedule.steps must be >= 1".into()));
        }
        if !(self.schedule.beta_min > 0.0
            && self.schedule.beta_min <= self.schedule.beta_max
            && self.schedule.beta_max < 1.0)
        {
            return Err(Error::Parameter(format!(
                "beta range ({}, {}) must satisfy 0 < min <= max < 1",
                self.schedule.beta_min, self.schedule.beta_max
            )));
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::Parameter(format!(
                "holdout_fraction {} outside [0, 1)",
                self.data.holdout_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.finetune.ones_fraction) {
            return Err(Error::Parameter(format!(
                "finetune.ones_fraction {} outside [0, 1]",
                self.finetune.ones_fraction
            )));
        }
        for (name, v) in [
            ("pretrain.vae_batch", self.pretrain.vae_batch),
            ("pretrain.denoiser_batch", self.pretrain.denoiser_batch),
            ("distill.batch", self.distill.batch),
            ("finetune.batch_clips", self.finetune.batch_clips),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Hash stamped into checkpoints; fields affecting parameter shapes or
    /// training semantics all live in this struct.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Path of a stage checkpoint inside `checkpoint_dir`.
    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.checkpoint_dir.join(format!("{stage}.ckpt"))
    }

    /// Path of a stage's JSON-lines training log.
    pub fn log_path(&self, stage: &str) -> PathBuf {
        self.checkpoint_dir.join(format!("{stage}_log.jsonl"))
    }
}
