//! Run configuration: one JSON document describing data, training and
//! output locations. Unknown keys are rejected; saving materializes every
//! default so a written-back config fully describes its run.

use etgan::features::SynthConfig;
use etgan::training::TrainingConfig;
use etgan::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub synth: SynthConfig,
    pub manifest_x: PathBuf,
    pub manifest_y: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            training: TrainingConfig::desk(),
            synth: SynthConfig::default(),
            manifest_x: PathBuf::from("data/manifest_a.json"),
            manifest_y: PathBuf::from("data/manifest_b.json"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        config.training.validate()?;
        Ok(config)
    }

    /// Write the fully resolved config next to the run outputs.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
