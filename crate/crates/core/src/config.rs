//! Run configuration: one TOML document with `[generator]`, `[train]` and
//! `[eval]` tables. Every key has a default and unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::TrainConfig;
use crate::error::{MocError, Result};
use crate::eval::report::EvalConfig;
use crate::synthgen::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MocError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, returning it with its source text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path).map_err(|e| MocError::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            MocError::Config(msg) => MocError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let m = &self.train.model;
        if (m.frame_height, m.frame_width) != (self.generator.height, self.generator.width) {
            return Err(MocError::Config(format!(
                "train.model frame size {}x{} differs from generator size {}x{}",
                m.frame_height, m.frame_width, self.generator.height, self.generator.width
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// What every output directory records about the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Config file as given, or `None` when defaults were used.
    pub config_source: Option<String>,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run_manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| MocError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("run_manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| MocError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| MocError::Parse {
            path,
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
