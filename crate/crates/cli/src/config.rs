//! The experiment configuration document: one JSON file naming the scene,
//! the output directory, the split, and every training/evaluation knob.
//! Unknown keys are rejected; missing keys take the documented defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use radfield::eval::EvalConfig;
use radfield::synth::SplitSetting;
use radfield::train::TrainConfig;
use radfield::{Error, Result};

pub const EXPERIMENT_SCHEMA: &str = "radfield.experiment/1";

fn default_schema() -> String {
    EXPERIMENT_SCHEMA.to_string()
}

fn default_split() -> SplitSetting {
    SplitSetting::HeldOutViewpoints { fraction: 0.2, radius: 1.0 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub scene_path: PathBuf,
    pub output_dir: PathBuf,
    /// Master seed: drives the split and the trainer.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: SplitSetting,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))?;
        if cfg.schema != EXPERIMENT_SCHEMA {
            return Err(Error::config(format!(
                "unsupported experiment schema `{}` (expected {EXPERIMENT_SCHEMA})",
                cfg.schema
            )));
        }
        // one master seed for the whole run
        cfg.train.seed = cfg.seed;
        cfg.metrics.seed = cfg.seed;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
