//! The experiment configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::GslConfig;
use crate::harness::HarnessConfig;
use crate::model::{Ablation, ModelConfig};
use crate::signal::{PreprocessConfig, SynthConfig};
use crate::train::{Phase, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Cohort written by `synth`.
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainBlock {
    /// Fields left out take the pretraining defaults.
    #[serde(deserialize_with = "pretrain_block")]
    pub pretrain: TrainConfig,
    pub supervised: TrainConfig,
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn pretrain_block<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<TrainConfig, D::Error> {
    let patch = serde_json::Value::deserialize(d)?;
    let mut base =
        serde_json::to_value(TrainConfig::pretrain()).map_err(serde::de::Error::custom)?;
    merge(&mut base, patch);
    serde_json::from_value(base).map_err(serde::de::Error::custom)
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig::pretrain(),
            supervised: TrainConfig::supervised(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub augment: AugmentPolicy,
    pub encoder: EncoderConfig,
    pub gsl: GslConfig,
    pub train: TrainBlock,
    pub harness: HarnessConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.gsl.validate(self.encoder.d_m)?;
        if self.train.pretrain.mode != Phase::Pretrain
            || self.train.supervised.mode != Phase::Supervised
        {
            return Err(Error::Config(
                "train: pretrain and supervised blocks have swapped modes".into(),
            ));
        }
        self.train.pretrain.validate()?;
        self.train.supervised.validate()?;
        self.harness.validate()
    }

    pub fn model(&self, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            gsl: self.gsl.clone(),
            ablation,
        }
    }

    /// Settings for the synthetic cohort: no reference channels and a pass
    /// band below the synthetic Nyquist frequency.
    pub fn synthetic() -> Self {
        let synth = SynthConfig::default();
        let nyquist = synth.sample_rate_hz as f64 / 2.0;
        Self {
            data: DataConfig {
                preprocess: PreprocessConfig {
                    reference: vec![],
                    band_hz: [0.5, (nyquist * 0.625).min(80.0)],
                    ..PreprocessConfig::default()
                },
                synth,
            },
            ..Self::default()
        }
    }

    /// [`ExperimentConfig::synthetic`] with a model and schedule small enough
    /// to run the LOSO ablation matrix on a desktop CPU in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::synthetic();
        cfg.encoder = EncoderConfig {
            d_m: 16,
            n_blocks: 1,
            hidden_channels: 8,
            slconv_scales: 4,
            slconv_base_len: 32,
            ..EncoderConfig::default()
        };
        cfg.gsl.cheb_k = 3;
        cfg.train.supervised = TrainConfig {
            lr: 1e-2,
            batch_size: 8,
            epochs: 12,
            gamma: 0.5,
            ..TrainConfig::supervised()
        };
        cfg.train.pretrain = TrainConfig {
            lr: 5e-4,
            batch_size: 32,
            epochs: 20,
            gamma: 0.5,
            temperature: 0.1,
            projector_dim: 16,
            ..TrainConfig::pretrain()
        };
        cfg
    }
}
