//! Config files: TOML with three sections mirroring the backbone, loss,
//! and training configs. Every key has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub dataset: String,
    /// rr | softargmax | softargmax_bce_combo | softmax_bce | rr_softargmax
    pub loss: String,
    pub batch_pairs: usize,
    pub correspondences_per_pair: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    pub cycle_period_steps: usize,
    pub max_steps: usize,
    pub validation_every: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            dataset: String::new(),
            loss: d.loss_kind.name().to_string(),
            batch_pairs: d.batch_pairs,
            correspondences_per_pair: d.correspondences_per_pair,
            base_lr: d.base_lr,
            max_lr: d.max_lr,
            cycle_period_steps: d.cycle_period_steps,
            max_steps: d.max_steps,
            validation_every: d.validation_every,
            patience: d.patience,
            seed: d.seed,
        }
    }
}

impl FileConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<FileConfig> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!(
            "{}: {}",
            origin.display(),
            e
        )))
    }

    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FileConfig::parse(&text, path)
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            dataset: PathBuf::from(&self.train.dataset),
            backbone: self.backbone.clone(),
            loss_kind: LossKind::parse(&self.train.loss)?,
            loss: self.loss.clone(),
            batch_pairs: self.train.batch_pairs,
            correspondences_per_pair: self.train.correspondences_per_pair,
            base_lr: self.train.base_lr,
            max_lr: self.train.max_lr,
            cycle_period_steps: self.train.cycle_period_steps,
            max_steps: self.train.max_steps,
            validation_every: self.train.validation_every,
            patience: self.train.patience,
            seed: self.train.seed,
        };
        config.validate()?;
        Ok(config)
    }
}
