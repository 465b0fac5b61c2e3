use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::waveattack::GridScore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub epsilon: f64,
    pub baseline_score: f64,
    pub strongest: GridScore,
    pub weakest: GridScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    /// Mean centre-line waviness over channels.
    pub single_waviness: f64,
    pub double_waviness: f64,
    /// Effective intervals summed over channels.
    pub single_effective_intervals: usize,
    pub double_effective_intervals: usize,
}

/// Numbers a run produces; two runs with the same config and seed must
/// agree on all of them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub final_train_loss: Option<f64>,
    pub train_acc_space: Option<f64>,
    /// Acc_space on the test split.
    pub acc_space: Option<f64>,
    pub test_loss: Option<f64>,
    /// Aggregate waviness under the first configured reduction.
    pub waviness: Option<f64>,
    pub waviness_by_reduction: BTreeMap<String, f64>,
    pub wave_pattern: Option<bool>,
    pub probe: Option<ProbeSummary>,
    pub attack: Option<AttackSummary>,
}

/// Ablation coordinate of a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorTag {
    pub axis: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub factor: Option<FactorTag>,
    /// Checkpoint directory relative to the run directory.
    pub checkpoint: Option<PathBuf>,
    pub metrics: RecordMetrics,
    /// Named artifacts, relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Completed stages in order; entries are only ever appended.
    pub stages: Vec<String>,
    /// Set when a stage failed inside an ablation sweep.
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn new(run_id: impl Into<String>, config: ExperimentConfig) -> Self {
        Self {
            run_id: run_id.into(),
            config,
            factor: None,
            checkpoint: None,
            metrics: RecordMetrics::default(),
            artifacts: BTreeMap::new(),
            stages: Vec::new(),
            error: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// A profile with its waviness analysis, as stored by the waviness stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileWaviness {
    pub origin: String,
    pub values: Vec<f64>,
    pub report: crate::metrics::WavinessReport,
}
