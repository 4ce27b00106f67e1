use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::ModelConfig;
use crate::train::optim::AdamHyper;

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    /// Seed of the data order and Gumbel noise; initialization uses `model.seed`.
    #[serde(default)]
    pub seed: u64,
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default)]
    pub manifest: PathBuf,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Evaluate the validation split every this many epochs; 0 disables it.
    #[serde(default)]
    pub eval_every: usize,
    /// Sample the consistency-loss argmax with Gumbel noise during training.
    #[serde(default = "default_true")]
    pub stochastic_consistency: bool,
    #[serde(default)]
    pub adam: AdamHyper,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_batch() -> usize {
    2
}

fn default_alpha0() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(manifest: impl Into<PathBuf>, epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            alpha0: default_alpha0(),
            seed: 0,
            manifest: manifest.into(),
            checkpoint_every: 0,
            eval_every: 0,
            stochastic_consistency: true,
            adam: AdamHyper::default(),
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Reads a config file and resolves the manifest path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.manifest.is_relative() && !cfg.manifest.as_os_str().is_empty() {
            cfg.manifest = path.parent().unwrap_or(Path::new(".")).join(&cfg.manifest);
        }
        Ok(cfg)
    }
}
