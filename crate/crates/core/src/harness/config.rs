//! Run configuration, read from TOML. Every key has a default, so an empty
//! file describes the reference desk-scale experiment.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::registry::SubspaceKind;
use crate::scenes::{SceneConfig, DEFAULT_SPLIT};
use crate::stage2::Stage2Config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let (train, val, test) = DEFAULT_SPLIT;
        Self { train, val, test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Adapter rank `r`.
    pub rank: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub subspaces: BTreeSet<SubspaceKind>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            rank: 4,
            lr: 1e-3,
            steps: 500,
            batch_size: 4,
            subspaces: SubspaceKind::ALL.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2RunConfig {
    /// Projection rank `r̂`.
    pub rank: usize,
    pub refresh_period: usize,
    pub lr: f64,
    pub scalar_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for Stage2RunConfig {
    fn default() -> Self {
        let o = Stage2Config::default();
        Self {
            rank: o.rank,
            refresh_period: o.refresh_period,
            lr: o.lr,
            scalar_lr: o.scalar_lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            steps: 200,
            batch_size: 4,
        }
    }
}

impl Stage2RunConfig {
    pub fn optim(&self) -> Stage2Config {
        Stage2Config {
            rank: self.rank,
            refresh_period: self.refresh_period,
            lr: self.lr,
            scalar_lr: self.scalar_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives model initialization, adapter initialization and batch order.
    /// Scene content is fixed by `scene.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Loss-curve sampling interval in steps.
    pub log_every: usize,
    /// Frames per forward pass during evaluation.
    pub eval_batch: usize,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub split: SplitConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2RunConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            log_every: 10,
            eval_batch: 16,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            split: SplitConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2RunConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn field(path: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) if !msg.starts_with(path) => Error::Config(format!("{path}: {msg}")),
        other => other,
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Model configuration with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| field("model", e))?;
        self.scene.validate().map_err(|e| field("scene", e))?;
        self.eval.validate().map_err(|e| field("eval", e))?;
        self.stage2.optim().validate().map_err(|e| field("stage2", e))?;
        if (self.scene.height, self.scene.width) != (self.model.input_height, self.model.input_width) {
            return Err(Error::Config(format!(
                "scene.height/width {}×{} must equal model.input_height/input_width {}×{}",
                self.scene.height, self.scene.width, self.model.input_height, self.model.input_width
            )));
        }
        if self.split.train == 0 || self.split.val == 0 || self.split.test == 0 {
            return Err(Error::Config("split: train, val and test must be positive".into()));
        }
        if self.stage1.rank == 0 {
            return Err(Error::Config("stage1.rank must be at least 1".into()));
        }
        if !(self.stage1.lr >= 0.0) {
            return Err(Error::Config("stage1.lr must be non-negative".into()));
        }
        if self.stage1.subspaces.is_empty() {
            return Err(Error::Config("stage1.subspaces must name at least one subspace".into()));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 {
            return Err(Error::Config("stage1.batch_size and stage2.batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }
}
