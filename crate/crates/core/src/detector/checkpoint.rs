//! JSON checkpoints: config echo, seed, step count and a flat parameter
//! array with the shape of each tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::DetectorParams;
use super::train::{TrainConfig, TrainMode};
use crate::error::{MocError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub mode: TrainMode,
    pub seed: u64,
    pub step: usize,
    pub shapes: Vec<ShapeEntry>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, mode: TrainMode, step: usize, params: &DetectorParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            mode,
            seed: config.seed,
            step,
            shapes: params
                .config
                .param_shapes()
                .into_iter()
                .map(|(name, rows, cols)| ShapeEntry { name: name.into(), rows, cols })
                .collect(),
            params: params.flat(),
        }
    }

    /// Rebuilds the parameters, rejecting any disagreement between the
    /// recorded shapes, the model config and the parameter count.
    pub fn params(&self) -> Result<DetectorParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(MocError::Shape(format!("unsupported checkpoint version {}", self.version)));
        }
        let expected: Vec<ShapeEntry> = self
            .config
            .model
            .param_shapes()
            .into_iter()
            .map(|(name, rows, cols)| ShapeEntry { name: name.into(), rows, cols })
            .collect();
        if expected != self.shapes {
            return Err(MocError::Shape("checkpoint shapes do not match its model config".into()));
        }
        DetectorParams::from_flat(self.config.model, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| MocError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MocError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MocError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::ModelConfig;

    fn config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                frame_height: 32,
                frame_width: 32,
                grid_h: 4,
                grid_w: 4,
                patch: 16,
                pool: 2,
                hidden: 6,
                enc_dim: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let cfg = config();
        let p = DetectorParams::init(cfg.model, 1).unwrap();
        let ck = Checkpoint::new(&cfg, TrainMode::FullMoc, 12, &p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = config();
        let p = DetectorParams::init(cfg.model, 1).unwrap();
        let mut ck = Checkpoint::new(&cfg, TrainMode::Baseline, 0, &p);
        ck.config.model.hidden = 7;
        assert!(matches!(ck.params(), Err(MocError::Shape(_))));
        let mut ck = Checkpoint::new(&cfg, TrainMode::Baseline, 0, &p);
        ck.params.pop();
        assert!(matches!(ck.params(), Err(MocError::Shape(_))));
        let mut ck = Checkpoint::new(&cfg, TrainMode::Baseline, 0, &p);
        ck.shapes[0].rows += 1;
        assert!(ck.params().is_err());
    }
}
