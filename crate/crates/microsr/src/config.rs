//! Run configuration: one TOML document with a section per module.
//!
//! Every field has a default, so an empty document is a valid paper-scale
//! configuration; command-line flags override individual fields afterwards.
//! Unknown keys anywhere are rejected outright, and every command echoes the
//! effective configuration into its output directory so a run can be
//! replayed exactly from its artifacts.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::AugmentOptions;
use crate::degradation::{DegradationParams, DownsampleMode};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::SsimConfig;
use crate::network::{DiscriminatorConfig, FeatureConfig, GeneratorConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 selects the runtime default.
    pub threads: usize,
    pub degradation: DegradationSection,
    pub dataset: DatasetSection,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
    pub losses: LossWeights,
    pub training: TrainingSection,
    pub inference: InferenceSection,
    pub metrics: SsimConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSection {
    pub sigma: f64,
    pub noise_variance: f64,
    pub factor: usize,
    pub downsample: DownsampleMode,
}

impl Default for DegradationSection {
    fn default() -> Self {
        DegradationSection {
            sigma: 2.0,
            noise_variance: 0.0,
            factor: 4,
            downsample: DownsampleMode::BlockAverage,
        }
    }
}

impl DegradationSection {
    pub fn params(&self) -> Result<DegradationParams> {
        let p = DegradationParams {
            sigma: self.sigma,
            noise_variance: self.noise_variance,
            factor: self.factor,
            downsample: self.downsample,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub patch_lr: usize,
    pub stride: usize,
    pub split_fraction: f64,
    pub augment: AugmentOptions,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            patch_lr: 96,
            stride: 96,
            split_fraction: 0.9,
            augment: AugmentOptions::none(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub checkpoint_interval: usize,
    pub d_steps_per_g_step: usize,
    pub mse_warmup_steps: u64,
    pub renoise_variance: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainingSection {
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_epsilon: d.adam_epsilon,
            checkpoint_interval: d.checkpoint_interval,
            d_steps_per_g_step: d.d_steps_per_g_step,
            mse_warmup_steps: d.mse_warmup_steps,
            renoise_variance: d.renoise_variance,
        }
    }
}

impl TrainingSection {
    pub fn to_train_config(&self, weights: LossWeights, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_epsilon: self.adam_epsilon,
            weights,
            checkpoint_interval: self.checkpoint_interval,
            seed,
            d_steps_per_g_step: self.d_steps_per_g_step,
            mse_warmup_steps: self.mse_warmup_steps,
            renoise_variance: self.renoise_variance,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub tile: usize,
    pub overlap: usize,
    pub refine_shifts: bool,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            tile: 100,
            overlap: 20,
            refine_shifts: false,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            degradation: Default::default(),
            dataset: Default::default(),
            generator: Default::default(),
            discriminator: Default::default(),
            features: Default::default(),
            losses: Default::default(),
            training: Default::default(),
            inference: Default::default(),
            metrics: Default::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Serializes the effective configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Writes `config_echo.toml` into a run's output directory.
    pub fn echo_into(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config_echo.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_config() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.generator.n_res_blocks, 16);
        assert_eq!(cfg.generator.n_features, 64);
        assert_eq!(cfg.training.batch_size, 16);
        assert_eq!(cfg.training.learning_rate, 1e-4);
        assert_eq!(cfg.training.epochs, 200);
        assert_eq!(cfg.inference.tile, 100);
        assert_eq!(cfg.inference.overlap, 20);
        assert_eq!(cfg.dataset.patch_lr, 96);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[training]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("[generator]\nn_res_block = 4").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.training.epochs = 3;
        cfg.degradation.noise_variance = 2e-4;
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.training.epochs, 3);
        assert_eq!(back.degradation.noise_variance, 2e-4);
        // Echo parses back identically.
        assert_eq!(text, back.to_toml().unwrap());
    }

    #[test]
    fn sections_override_individually() {
        let cfg = RunConfig::from_toml(
            "[generator]\nn_res_blocks = 2\nn_features = 16\n\n[dataset]\nstride = 48\n",
        )
        .unwrap();
        assert_eq!(cfg.generator.n_res_blocks, 2);
        assert_eq!(cfg.generator.upscale, 4, "untouched fields keep defaults");
        assert_eq!(cfg.dataset.stride, 48);
    }
}
