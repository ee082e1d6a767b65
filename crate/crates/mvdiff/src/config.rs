//! Run configuration: a TOML file with [model], [train], [sample], and
//! [data] sections, every field defaulted, unknown keys rejected. The
//! content hash of the merged config travels with checkpoints and reports
//! so resumed or compared runs can be verified to share settings.

use crate::error::{Error, Result};
use crate::evalx::EvalBands;
use crate::model::ModelConfig;
use crate::rng::fnv1a64;
use crate::sampling::SampleConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenes: usize,
    pub seed: u64,
    pub actors: usize,
    pub horizon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { scenes: 8, seed: 0, actors: 4, horizon: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
    pub eval: EvalBands,
}

impl RunConfig {
    pub fn from_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Validation(format!("bad config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.frames)?;
        self.sample.validate()?;
        if self.data.horizon < self.model.frames {
            return Err(Error::Validation(format!(
                "data horizon {} shorter than model window {}",
                self.data.horizon, self.model.frames
            )));
        }
        Ok(())
    }

    /// Canonical serialization: field order is fixed by the struct, so
    /// semantically equal configs hash equally.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}
