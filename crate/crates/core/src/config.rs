//! Experiment configuration: one JSON document with a section per module,
//! plus dotted-key overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::labeling::ReconChannelConfig;
use crate::segnet::SegNetConfig;
use crate::seed;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_channels: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Every sub-seed is derived from this one.
    pub seed: u64,
    pub data: DataConfig,
    pub recon: ReconChannelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

const SECTIONS: [&str; 4] = ["train", "model", "data", "recon"];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copy with the sub-seeds filled in from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.seed = seed::derive_seed(self.seed, "data");
        c.recon.seed = seed::derive_seed(self.seed, "recon");
        c.train.seed = seed::derive_seed(self.seed, "train");
        c
    }

    pub fn segnet_config(&self) -> SegNetConfig {
        SegNetConfig::new(
            self.data.num_grids,
            self.model.hidden_channels,
            self.data.num_classes,
            seed::derive_seed(self.seed, "model"),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.recon.validate()?;
        self.train.validate()?;
        self.segnet_config().validate()
    }

    /// Applies `key=value`. Dotted keys address a path from the root; a bare
    /// key names a top-level field or else is looked up in the train, model,
    /// data and recon sections, in that order. Values parse as JSON, falling back
    /// to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let path: Vec<String> = if key.contains('.') {
            key.split('.').map(str::to_string).collect()
        } else if root.get(key).is_some() && !SECTIONS.contains(&key) {
            vec![key.to_string()]
        } else {
            let section = SECTIONS
                .iter()
                .find(|s| root.get(**s).and_then(|v| v.get(key)).is_some());
            match section {
                Some(s) => vec![s.to_string(), key.to_string()],
                None => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        };
        let mut slot = &mut root;
        for part in &path {
            slot = slot
                .get_mut(part.as_str())
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}
