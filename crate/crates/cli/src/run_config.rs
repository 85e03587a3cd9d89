//! The JSON run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use mmr_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::{usage, CmdResult, Context};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct Paths {
    /// Plain-text training corpus. Required for `train`.
    pub corpus: Option<PathBuf>,
    /// Defaults to `$MMR_OUT_DIR`, then `runs`.
    #[serde(alias = "out_dir")]
    pub out_dir: Option<PathBuf>,
    /// Defaults to `<out-dir>/metrics.jsonl`.
    #[serde(alias = "metrics_file")]
    pub metrics_file: Option<PathBuf>,
    /// Fixed vocabulary map; byte-level when omitted.
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> CmdResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    /// Parses a run configuration; errors name the offending key and position.
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> CmdResult {
        self.model.validate().context("model")?;
        self.train.validate().context("train")?;
        Ok(())
    }

    /// Returns a copy with the dotted `key` (e.g. `model.latent_dim`) set to
    /// `raw`, read as JSON when it parses and as a string otherwise.
    pub fn with_override(&self, key: &str, raw: &str) -> CmdResult<Self> {
        let mut doc = serde_json::to_value(self).map_err(usage)?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| usage(format!("unknown sweep key {key}")))?;
        }
        *slot = value;
        serde_json::from_value(doc).map_err(|e| usage(format!("{key}={raw}: {e}")))
    }
}
