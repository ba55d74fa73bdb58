//! Model and run configuration.
//!
//! [`ModelConfig`] is the canonical description of a model: it is embedded
//! in every checkpoint and must survive a serialize/deserialize round trip
//! unchanged. [`RunConfigFile`] is the TOML surface of the `train` command —
//! the same knobs plus dataset location and output paths, with unknown keys
//! rejected.

use crate::data::Mode;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Incremental model variants, from the global-only baseline to the full
/// fused model.
///
/// - `S1` — global branch only
/// - `S2` — adds the local branch, combined by elementwise addition
/// - `S3` — local branch combined by convolution instead
/// - `S4` — adds the classification loss on pooled class features
/// - `S5` — adds learned pixel-wise weight-map fusion
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setup {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl Setup {
    pub const ALL: [Setup; 5] = [Setup::S1, Setup::S2, Setup::S3, Setup::S4, Setup::S5];
}

/// How the per-class images merge into the local result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalVariant {
    /// Elementwise sum of the class images.
    Add,
    /// Concatenate class images and mix with a learned convolution.
    Conv,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("setup {setup:?} requires local_variant = {required:?}, got {got:?}")]
    VariantMismatch { setup: Setup, required: LocalVariant, got: LocalVariant },
    #[error("{field} must be {requirement}, got {got}")]
    BadField { field: &'static str, requirement: &'static str, got: String },
}

/// Everything the model and trainer need to build and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Number of semantic classes.
    pub c: usize,
    /// Base channel width of the generator.
    pub nf: usize,
    /// Base channel width of the discriminators.
    pub nf_d: usize,
    /// Residual blocks in the encoder and in the global decoder.
    pub r: usize,
    pub setup: Setup,
    pub local_variant: LocalVariant,
    pub lambda_gan: f32,
    pub lambda_l1_local: f32,
    pub lambda_ce: f32,
    pub lambda_l1_fused: f32,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Semantic,
            c: 4,
            nf: 32,
            nf_d: 32,
            r: 3,
            setup: Setup::S5,
            local_variant: LocalVariant::Conv,
            lambda_gan: 1.0,
            lambda_l1_local: 10.0,
            lambda_ce: 1.0,
            lambda_l1_fused: 10.0,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            batch_size: 1,
            epochs: 200,
            seed: 1,
            image_h: 64,
            image_w: 64,
        }
    }
}

impl ModelConfig {
    /// Check the setup constraints and numeric sanity of every field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &'static str, requirement: &'static str, got: String| {
            Err(ConfigError::BadField { field, requirement, got })
        };
        if self.c < 2 {
            return bad("c", "at least 2", self.c.to_string());
        }
        if self.nf == 0 || self.nf_d == 0 {
            return bad("nf/nf_d", "positive", format!("{}/{}", self.nf, self.nf_d));
        }
        if self.r == 0 {
            return bad("r", "positive", self.r.to_string());
        }
        match self.setup {
            // The add-combine row: anything else would silently test a
            // different model than the name claims.
            Setup::S2 if self.local_variant != LocalVariant::Add => {
                return Err(ConfigError::VariantMismatch {
                    setup: self.setup,
                    required: LocalVariant::Add,
                    got: self.local_variant,
                });
            }
            Setup::S3 | Setup::S4 | Setup::S5 if self.local_variant != LocalVariant::Conv => {
                return Err(ConfigError::VariantMismatch {
                    setup: self.setup,
                    required: LocalVariant::Conv,
                    got: self.local_variant,
                });
            }
            _ => {}
        }
        for (name, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_l1_local", self.lambda_l1_local),
            ("lambda_ce", self.lambda_ce),
            ("lambda_l1_fused", self.lambda_l1_fused),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::BadField {
                    field: match name {
                        "lambda_gan" => "lambda_gan",
                        "lambda_l1_local" => "lambda_l1_local",
                        "lambda_ce" => "lambda_ce",
                        _ => "lambda_l1_fused",
                    },
                    requirement: "a non-negative finite number",
                    got: v.to_string(),
                });
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "positive", self.lr.to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "in [0, 1)", format!("{}/{}", self.beta1, self.beta2));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "positive", self.batch_size.to_string());
        }
        if self.epochs == 0 {
            return bad("epochs", "positive", self.epochs.to_string());
        }
        if self.image_h % 4 != 0 || self.image_w % 4 != 0 {
            return bad(
                "image_h/image_w",
                "divisible by 4",
                format!("{}x{}", self.image_h, self.image_w),
            );
        }
        // The four-stage discriminator halves resolution four times; below
        // 32 pixels its last stage degenerates to 1×1 planes, where
        // instance norm zeroes both activations and gradients.
        if self.image_h < 32 || self.image_w < 32 {
            return bad(
                "image_h/image_w",
                "at least 32",
                format!("{}x{}", self.image_h, self.image_w),
            );
        }
        Ok(())
    }

    /// Local branch present (everything past the global-only baseline).
    pub fn has_local(&self) -> bool {
        self.setup != Setup::S1
    }

    /// Classification loss active.
    pub fn has_classifier(&self) -> bool {
        matches!(self.setup, Setup::S4 | Setup::S5)
    }

    /// Learned weight-map fusion active.
    pub fn has_fusion(&self) -> bool {
        self.setup == Setup::S5
    }

    /// Channels entering the encoder: the one-hot layout, plus a
    /// conditioning photograph in cross-view mode.
    pub fn encoder_in_channels(&self) -> usize {
        match self.mode {
            Mode::Semantic => self.c,
            Mode::CrossView => self.c + 3,
        }
    }
}

fn default_checkpoint_every() -> usize {
    500
}
fn default_log_every() -> usize {
    1
}
fn default_void_id() -> u8 {
    255
}
fn default_synth_samples() -> usize {
    16
}

/// The `train --config` file. All model keys are optional and default to
/// [`ModelConfig::default`]; unknown keys are rejected outright.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub mode: Option<Mode>,
    pub c: Option<usize>,
    pub nf: Option<usize>,
    pub nf_d: Option<usize>,
    pub r: Option<usize>,
    pub setup: Option<Setup>,
    pub local_variant: Option<LocalVariant>,
    pub lambda_gan: Option<f32>,
    pub lambda_l1_local: Option<f32>,
    pub lambda_ce: Option<f32>,
    pub lambda_l1_fused: Option<f32>,
    pub lr: Option<f32>,
    pub beta1: Option<f32>,
    pub beta2: Option<f32>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub image_h: Option<usize>,
    pub image_w: Option<usize>,

    /// Train on the built-in synthetic dataset instead of `data_dir`.
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default = "default_synth_samples")]
    pub synth_samples: usize,
    pub data_dir: Option<PathBuf>,
    /// Output directory; falls back to the environment default root.
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_void_id")]
    pub void_id: u8,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Merge the file over the defaults into a validated [`ModelConfig`].
    pub fn resolve(&self) -> Result<ModelConfig, ConfigError> {
        let d = ModelConfig::default();
        let config = ModelConfig {
            mode: self.mode.unwrap_or(d.mode),
            c: self.c.unwrap_or(d.c),
            nf: self.nf.unwrap_or(d.nf),
            nf_d: self.nf_d.unwrap_or(d.nf_d),
            r: self.r.unwrap_or(d.r),
            setup: self.setup.unwrap_or(d.setup),
            local_variant: match (self.local_variant, self.setup) {
                (Some(v), _) => v,
                // Let `setup = "S2"` alone resolve to a valid config.
                (None, Some(Setup::S2)) => LocalVariant::Add,
                (None, _) => d.local_variant,
            },
            lambda_gan: self.lambda_gan.unwrap_or(d.lambda_gan),
            lambda_l1_local: self.lambda_l1_local.unwrap_or(d.lambda_l1_local),
            lambda_ce: self.lambda_ce.unwrap_or(d.lambda_ce),
            lambda_l1_fused: self.lambda_l1_fused.unwrap_or(d.lambda_l1_fused),
            lr: self.lr.unwrap_or(d.lr),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
            image_h: self.image_h.unwrap_or(d.image_h),
            image_w: self.image_w.unwrap_or(d.image_w),
        };
        config.validate()?;
        Ok(config)
    }
}
