use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lr_max: 5e-4,
            lr_min: 1e-6,
            epochs: 100,
            batch_size: 64,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch cosine annealing from `lr_max` (first epoch) to `lr_min` (last epoch).
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_max);
    }
    let phase = PI * epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}
