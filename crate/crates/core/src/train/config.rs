use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::MetricOptions;
use crate::model::NetworkConfig;
use crate::synth::augment::AugmentConfig;

/// Everything that determines a training run. Loaded from TOML; every
/// field is optional and defaults to the toy profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Informational: "toy" or "paper".
    pub profile: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Relative improvement needed to reset the plateau and early-stop
    /// counters.
    pub plateau_threshold: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Run on a single thread.
    pub deterministic: bool,
    pub loss: LossConfig,
    pub network: NetworkConfig,
    pub augment: AugmentConfig,
    pub metrics: MetricOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Small-scale profile trained from scratch on 64×64 synthetic data.
    pub fn toy() -> Self {
        Self {
            profile: "toy".into(),
            lr: 1e-3,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.25,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            max_epochs: 20,
            early_stop_patience: 20,
            batch_size: 8,
            eval_batch_size: 16,
            seed: 0,
            deterministic: false,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
            augment: AugmentConfig::default(),
            metrics: MetricOptions::default(),
        }
    }

    /// The published recipe (meant for a pretrained backbone).
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            lr: 1e-5,
            max_epochs: 60,
            ..Self::toy()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile {other:?} (toy or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("plateau_factor", self.plateau_factor),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.plateau_threshold >= 0.0) {
            return Err(Error::Config("weight_decay and plateau_threshold must be ≥ 0".into()));
        }
        if self.plateau_factor >= 1.0 {
            return Err(Error::Config("plateau_factor must be below 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch sizes and max_epochs must be positive".into()));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        self.loss.validate()?;
        self.network.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
