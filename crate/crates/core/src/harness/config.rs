//! JSON run configuration: `{ "model": .., "train": .., "task": .. }`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::task::TaskSpec;
use super::train::TrainConfig;
use crate::attention::Variant;
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        if let Some(task) = &cfg.task {
            task.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.model.attn.variant = v;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn task(&self) -> Result<&TaskSpec> {
        self.task.as_ref().ok_or_else(|| config_err!("this command needs a `task` section in the config"))
    }

    /// Hex FNV-1a of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:016x}", rng::fnv1a(serde_json::to_string(self)?.as_bytes())))
    }
}
