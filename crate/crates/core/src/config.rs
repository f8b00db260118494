//! Run configuration document shared by the `train`, `infer` and
//! `gradcheck` commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::taskgen::TaskSpec;
use crate::training::TrainConfig;

/// `{"backbone": {...}, "train": {...}, "sampler": {...}}`; the task list
/// with sampling weights lives in `train.tasks`. Every level rejects unknown
/// keys and missing keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    /// Parses and fully validates a config document.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        for t in &self.train.tasks {
            t.task.parse::<TaskSpec>()?;
        }
        Ok(())
    }
}
