use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::SensorConfig;
use super::losses::LossWeights;
use crate::error::{MslError, Result};
use crate::model::ModelConfig;

/// Training run settings; read from a TOML file whose keys are exactly these
/// field names (`[model]` and `[loss]` as tables).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub views: usize,
    pub kspace_rate: f64,
    pub center_fraction: f64,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    pub model: ModelConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale run: 8 + 2 pairs at 64x64, 2,000 iterations.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            lr: 2e-4,
            lr_decay: 0.5,
            lr_decay_every: 10_000,
            beta1: 0.5,
            beta2: 0.99,
            weight_decay: 1e-4,
            seed: 0,
            views: 64,
            kspace_rate: 0.25,
            center_fraction: 0.08,
            train_pairs: 8,
            heldout_pairs: 2,
            checkpoint_every: 500,
            keep_checkpoints: 3,
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
        }
    }

    /// Full-scale schedule: 100k iterations, lr halved every 10k.
    pub fn full_scale() -> Self {
        Self {
            iterations: 100_000,
            model: ModelConfig::full_scale(),
            ..Self::desk()
        }
    }

    pub fn sensors(&self) -> SensorConfig {
        SensorConfig {
            views: self.views,
            rate: self.kspace_rate,
            center_fraction: self.center_fraction,
        }
    }

    /// Step decay: `lr * lr_decay^(floor(iteration / lr_decay_every))`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let k = iteration / self.lr_decay_every.max(1);
        self.lr * self.lr_decay.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MslError::Config(m.to_string()));
        self.model.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite nonnegative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.views == 0 || !(self.kspace_rate > 0.0 && self.kspace_rate <= 1.0) {
            return bad("views must be positive and kspace_rate in (0, 1]");
        }
        if self.train_pairs == 0 {
            return bad("train_pairs must be positive");
        }
        let w = &self.loss;
        if [w.phi_f, w.phi_a, w.phi_e].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be nonnegative");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| MslError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
