//! One sectioned JSON file describing a whole run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::objectives::LossConfig;
use crate::synthgen::{SynthConfig, WindowConfig};
use crate::training::{TrainConfig, TrainSetup};

/// File name under which the resolved config is echoed into output directories.
pub const RESOLVED_CONFIG_NAME: &str = "config.resolved.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub windows: WindowConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses and validates; missing keys take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(
                if path == "." {
                    "config".to_string()
                } else {
                    path
                },
                e.into_inner().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.eval.validate()?;
        self.setup().validate()
    }

    /// The sections a trainer consumes.
    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            model: self.model.clone(),
            windows: self.windows.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Writes the resolved config into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.to_json_pretty()).map_err(|e| Error::io(path, e))
    }
}
