use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;

/// Hyperparameters of the contrastive pretraining stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub lr_drop_epochs: Vec<u64>,
    pub lr_drop_factor: f64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            temperature: 0.07,
            momentum: 0.999,
            queue_size: 1024,
            batch_size: 8,
            epochs: 200,
            lr0: 0.03,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            lr_drop_epochs: vec![120, 160],
            lr_drop_factor: 10.0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("pretrain.temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("pretrain.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.queue_size == 0 {
            return Err(Error::Config("pretrain.batch_size and pretrain.queue_size must be positive".into()));
        }
        if !self.queue_size.is_multiple_of(self.batch_size) {
            return Err(Error::Config(format!(
                "pretrain.queue_size {} is not a multiple of pretrain.batch_size {}",
                self.queue_size, self.batch_size
            )));
        }
        if !(self.lr0 > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config("pretrain.lr0 and pretrain.lr_drop_factor must be positive".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config("pretrain.weight_decay must be >= 0 and pretrain.sgd_momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a zero-based epoch.
pub fn lr_at(epoch: u64, cfg: &PretrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr0 / cfg.lr_drop_factor.powi(drops as i32)
}
