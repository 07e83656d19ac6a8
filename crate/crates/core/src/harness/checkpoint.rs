//! JSON checkpoints: named parameter arrays, optimizer moments, config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{io_err, PcanError, Result};
use crate::harness::config::RunConfig;
use crate::model::{InferenceModel, Pcan};
use crate::nn::{AdamW, ParamStore};

pub const FORMAT: &str = "pcan-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub epoch: usize,
    pub config_hash: String,
    pub config: RunConfig,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &Pcan, optimizer: Option<&AdamW>, epoch: usize) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, name, t)| NamedArray { name: name.to_string(), rows: t.rows, cols: t.cols, data: t.data.clone() })
            .collect();
        Self { format: FORMAT.into(), epoch, config_hash: config.hash(), config: config.clone(), params, optimizer: optimizer.cloned() }
    }

    pub fn model(&self) -> Result<Pcan> {
        if self.format != FORMAT {
            return Err(PcanError::Config(format!("unknown checkpoint format {}", self.format)));
        }
        if self.config.hash() != self.config_hash {
            return Err(PcanError::Config("checkpoint config hash does not match its config".into()));
        }
        let mut store = ParamStore::new();
        for a in &self.params {
            if a.rows * a.cols != a.data.len() {
                return Err(PcanError::ShapeMismatch(format!("{}: {}x{} with {} values", a.name, a.rows, a.cols, a.data.len())));
            }
            store.add(a.name.clone(), Tensor::from_vec(a.rows, a.cols, a.data.clone()));
        }
        Pcan::with_params(self.config.model.clone(), store)
    }

    pub fn inference_model(&self) -> Result<InferenceModel> {
        Ok(InferenceModel::new(self.model()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        // write then rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(PcanError::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
