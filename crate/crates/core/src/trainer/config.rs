//! TOML run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::train::{RegularizerConfig, TrainConfig};
use crate::ann::Architecture;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::lr")]
    pub lr: f32,
    #[serde(default = "defaults::momentum")]
    pub momentum: f32,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Either one width shared by every block or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Channels {
    Uniform(usize),
    PerBlock(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Ceiling `(Q−1)λ/Q`.
    Exact,
    /// Ceiling `λ`.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: usize,
    pub channels: Channels,
    #[serde(default = "defaults::q_steps")]
    pub q_steps: u32,
    #[serde(default)]
    pub pool_after: Vec<usize>,
    #[serde(default = "defaults::clip")]
    pub clip: ClipMode,
    #[serde(default = "defaults::lambda_init")]
    pub lambda_init: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    #[serde(default)]
    pub coeff: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub synthetic: bool,
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    /// Fraction of samples held out for evaluation.
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub model: ModelSection,
    #[serde(default)]
    pub reg: RegSection,
    pub data: DataSection,
}

mod defaults {
    use super::ClipMode;
    pub fn lr() -> f32 {
        0.02
    }
    pub fn momentum() -> f32 {
        0.9
    }
    pub fn weight_decay() -> f32 {
        5e-4
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn batch() -> usize {
        32
    }
    pub fn q_steps() -> u32 {
        16
    }
    pub fn clip() -> ClipMode {
        ClipMode::Exact
    }
    pub fn lambda_init() -> f32 {
        2.0
    }
    pub fn samples() -> usize {
        512
    }
    pub fn classes() -> usize {
        2
    }
    pub fn test_fraction() -> f64 {
        0.25
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_config().validate().map_err(ConfigError::Invalid)?;
        let m = &self.model;
        if m.blocks == 0 {
            return Err(ConfigError::Invalid("model.blocks must be at least 1".into()));
        }
        if let Channels::PerBlock(list) = &m.channels {
            if list.len() != m.blocks {
                return Err(ConfigError::Invalid(format!(
                    "model.channels lists {} widths for {} blocks",
                    list.len(),
                    m.blocks
                )));
            }
        }
        if self.channel_list().contains(&0) {
            return Err(ConfigError::Invalid("channel widths must be positive".into()));
        }
        if m.q_steps < 2 || !m.q_steps.is_power_of_two() {
            return Err(ConfigError::Invalid(format!(
                "model.q_steps must be a power of two >= 2, got {}",
                m.q_steps
            )));
        }
        if let Some(&p) = m.pool_after.iter().find(|&&p| p >= m.blocks) {
            return Err(ConfigError::Invalid(format!(
                "model.pool_after index {p} is not a block"
            )));
        }
        if !(m.lambda_init > 0.0) {
            return Err(ConfigError::Invalid("model.lambda_init must be positive".into()));
        }
        if !(self.reg.coeff >= 0.0) {
            return Err(ConfigError::Invalid("reg.coeff must be nonnegative".into()));
        }
        let d = &self.data;
        match (d.synthetic, &d.images, &d.labels) {
            (true, None, None) => {
                if d.classes < 2 || d.samples < 2 {
                    return Err(ConfigError::Invalid(
                        "synthetic data needs at least 2 classes and 2 samples".into(),
                    ));
                }
            }
            (false, Some(_), Some(_)) => {}
            _ => {
                return Err(ConfigError::Invalid(
                    "data needs either synthetic = true or both images and labels paths".into(),
                ))
            }
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(ConfigError::Invalid("data.test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn channel_list(&self) -> Vec<usize> {
        match &self.model.channels {
            Channels::Uniform(c) => vec![*c; self.model.blocks],
            Channels::PerBlock(list) => list.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            epochs: self.train.epochs,
            batch: self.train.batch,
            seed: self.train.seed,
        }
    }

    pub fn regularizer(&self) -> Option<RegularizerConfig> {
        (self.reg.coeff > 0.0).then_some(RegularizerConfig {
            coeff: self.reg.coeff,
        })
    }

    pub fn architecture(&self, input_shape: [usize; 3], classes: usize) -> Architecture {
        let mut arch = Architecture::new(input_shape, self.channel_list(), classes, self.model.q_steps);
        arch.pool_after = self.model.pool_after.clone();
        arch.lambda_init = self.model.lambda_init;
        arch.clip_hi = match self.model.clip {
            ClipMode::Exact => self.model.q_steps - 1,
            ClipMode::Full => self.model.q_steps,
        };
        arch
    }
}
