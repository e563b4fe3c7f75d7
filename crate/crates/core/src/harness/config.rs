use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::mdp::{BehaviorPolicy, ContinuousEnv};
use crate::sac::TrainConfig;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One experiment: environment, data, hyperparameters and seeds. Every field
/// has a default, so `{}` is a complete configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: ContinuousEnv,
    /// Existing dataset (`.jsonl` or `.meta.json` path); generated when absent.
    pub dataset: Option<PathBuf>,
    pub dataset_size: usize,
    pub behavior: String,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: ContinuousEnv::point_mass(),
            dataset: None,
            dataset_size: 10_000,
            behavior: "medium".into(),
            train: TrainConfig::toy(),
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.dataset_size == 0 {
            return Err(LabError::Config("dataset_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("at least one seed is required".into()));
        }
        BehaviorPolicy::preset(&self.behavior).map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything except the seeds.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        let value = serde_json::to_value(&c).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
