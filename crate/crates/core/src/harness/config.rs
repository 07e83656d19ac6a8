//! Run configuration: one TOML file, overridable through `PCAN_*` variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, PcanError, Result};
use crate::losses::{LossWeights, ObjectiveFlags};
use crate::model::ModelConfig;
use crate::nn::AdamWConfig;
use crate::pam::{PamConfig, PriorSource};
use crate::synthdata::SceneConfig;

pub const ENV_PREFIX: &str = "PCAN_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset written by `synth generate`; generated in memory when absent.
    pub root: Option<PathBuf>,
    /// Scenes to generate in memory (train + val).
    pub n_scenes: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, n_scenes: 250, scene: SceneConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fractions of the epoch budget after which the rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![2.0 / 3.0, 11.0 / 12.0],
            decay: 0.1,
            batch_size: 4,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Learning rate for a 0-based epoch out of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch as f64 >= (m * epochs as f64).round()).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// Which CLUM / PAM pieces are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    /// Run the contrastive part at all. Off = the plain baseline.
    pub use_clum: bool,
    /// Off replaces PAM negatives with unconstrained random boxes.
    pub use_pam: bool,
    pub use_contrastive_loss: bool,
    pub prior_source: PriorSource,
}

impl Default for Switches {
    fn default() -> Self {
        Self { use_clum: true, use_pam: true, use_contrastive_loss: true, prior_source: PriorSource::GtOracleConditional }
    }
}

impl Switches {
    pub fn effective_source(&self) -> PriorSource {
        if self.use_pam {
            self.prior_source
        } else {
            PriorSource::GtUnconstrainedRandom
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Validation scenes evaluated per epoch (all when 0).
    pub eval_limit: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pam: PamConfig,
    pub loss: LossWeights,
    pub objective: ObjectiveFlags,
    pub optim: OptimConfig,
    pub switches: Switches,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            eval_limit: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pam: PamConfig::default(),
            loss: LossWeights::default(),
            objective: ObjectiveFlags::default(),
            optim: OptimConfig::default(),
            switches: Switches::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pam.validate()?;
        self.loss.validate()?;
        self.data.scene.validate()?;
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0) {
            return Err(PcanError::Config("batch_size and lr must be positive".into()));
        }
        if self.switches.use_clum && self.pam.group_size() > self.model.queries {
            return Err(PcanError::Config(format!(
                "group of {} boxes does not fit into {} queries",
                self.pam.group_size(),
                self.model.queries
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = text.parse().map_err(|e: toml::de::Error| PcanError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| PcanError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `text`, then apply overrides such as `PCAN_EPOCHS=3` or
    /// `PCAN_MODEL__CHANNELS=16` (`__` separates nested keys).
    pub fn from_toml_with_overrides<I>(text: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value: toml::Value = text.parse().map_err(|e: toml::de::Error| PcanError::Config(e.to_string()))?;
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
            set_path(&mut value, &path, parse_scalar(&v))?;
        }
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_with_overrides(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &[String], v: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| PcanError::Config("empty override key".into()))?;
    let mut cur = root;
    for p in parents {
        let table = cur.as_table_mut().ok_or_else(|| PcanError::Config(format!("override path through non-table at {p}")))?;
        cur = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| PcanError::Config(format!("override {last} targets a non-table")))?;
    table.insert(last.clone(), v);
    Ok(())
}
