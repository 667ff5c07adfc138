use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and optimization settings of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_size: usize,
    /// Loss weight of healthy controls (label 0); pathology weighs 1.
    pub hc_penalty_weight: f64,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 430,
            hidden: vec![256, 128, 64],
            dropout: 0.5,
            batch_size: 64,
            hc_penalty_weight: 2.0,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            max_epochs: 300,
            early_stop_patience: 20,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("network: {msg}")));
        if self.input_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return bad("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.hc_penalty_weight > 0.0) || !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return bad("weights, learning rate and epsilon must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must be in (0, 1] and eps positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }
}
