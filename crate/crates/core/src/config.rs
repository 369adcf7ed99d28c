//! Experiment configuration and its content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::diffusion::checkpoint::canonical_json;
use crate::diffusion::{NoiseSchedule, PretrainConfig, UNetConfig};
use crate::engine::DiecConfig;
use crate::error::{DiecError, Result};
use crate::search::SearchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end).map_err(|e| DiecError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub backbone: BackboneConfig,
    pub search: SearchConfig,
    pub diec: DiecConfig,
    /// Not part of the hash.
    pub output_dir: String,
    /// Global seed; every stage derives its streams from it.
    pub seed: u64,
    /// Also compute the exhaustive labeled grid (evaluation only).
    #[serde(default)]
    pub grid_full: bool,
    /// Sample count for the before/after sample grids.
    #[serde(default = "default_sample_count")]
    pub samples: usize,
}

fn default_sample_count() -> usize {
    16
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            backbone: BackboneConfig::default(),
            search: SearchConfig::default(),
            diec: DiecConfig::default(),
            output_dir: "runs/default".into(),
            seed: 0,
            grid_full: false,
            samples: default_sample_count(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DiecError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DiecError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Sorted-key JSON of the whole config.
    pub fn canonical(&self) -> Result<String> {
        canonical_json(self)
    }

    /// Hex SHA-256 of the canonical form with `output_dir` blanked.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir.clear();
        Ok(hex::encode(Sha256::digest(c.canonical()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: DiecError| match e {
            DiecError::Config(m) | DiecError::Param(m) => DiecError::Config(m),
            other => other,
        };
        self.dataset.validate().map_err(cfg_err)?;
        self.backbone.unet.validate()?;
        self.backbone.schedule.build()?;
        if self.backbone.unet.image_size != self.dataset.image_size {
            return Err(DiecError::Config(format!(
                "dataset image size {} differs from model input size {}",
                self.dataset.image_size, self.backbone.unet.image_size
            )));
        }
        if self.backbone.pretrain.batch_size == 0 {
            return Err(DiecError::Config("pretraining batch size must be positive".into()));
        }
        self.search.validate(self.dataset.classes)?;
        self.diec.validate()?;
        Ok(())
    }
}
