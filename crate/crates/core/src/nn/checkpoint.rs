use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_model, Init, Model, ModelConfig};
use super::params::ParamStore;
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const METADATA_FILE: &str = "checkpoint.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc_space: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    epoch: usize,
    model: ModelConfig,
    train: TrainConfig,
    metrics_history: Vec<EpochMetrics>,
}

/// Trained weights plus everything needed to rebuild and audit them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub weights: ParamStore,
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics_history: Vec<EpochMetrics>,
}

impl Checkpoint {
    /// Writes `weights.safetensors` and `checkpoint.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.weights.save(&dir.join(WEIGHTS_FILE))?;
        let meta = Metadata {
            epoch: self.epoch,
            model: self.model.clone(),
            train: self.train.clone(),
            metrics_history: self.metrics_history.clone(),
        };
        std::fs::write(dir.join(METADATA_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", meta_path.display())))?;
        let meta: Metadata = serde_json::from_str(&text)?;
        let mut model = Self::skeleton_model(&meta.model)?;
        model.params_mut().load(&dir.join(WEIGHTS_FILE))?;
        Ok(Self {
            weights: model.params().clone(),
            epoch: meta.epoch,
            model: meta.model,
            train: meta.train,
            metrics_history: meta.metrics_history,
        })
    }

    /// Builds the architecture with random weights so the stored ones can
    /// be loaded over it.
    fn skeleton_model(cfg: &ModelConfig) -> Result<Model> {
        let mut cfg = cfg.clone();
        cfg.init = Init::Random;
        build_model(&cfg)
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Self::skeleton_model(&self.model)?;
        let bytes = self.weights.to_safetensors_bytes()?;
        model.params_mut().load_from_bytes(&bytes)?;
        Ok(model)
    }
}
