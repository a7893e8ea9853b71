//! Run configuration: one TOML file covering the model, the optimizer, the
//! training loop, evaluation, and dataset synthesis. Every field has a
//! default, so a config file only states what it changes.

use crate::datakit::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{EvalOptions, OptimConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; everything else derives from it.
    pub seed: u64,
    /// Where runs write checkpoints and reports.
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if self.synth.width != self.model.image_width || self.synth.height != self.model.image_height
        {
            return Err(Error::Config(format!(
                "synthesis renders {}x{} but the model takes {}x{}",
                self.synth.width, self.synth.height, self.model.image_width, self.model.image_height
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("unencodable: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}
