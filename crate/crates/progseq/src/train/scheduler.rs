//! Plateau learning-rate scheduling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Epochs without strict improvement before a decay.
    pub patience: usize,
    /// Multiplicative decay factor in `(0, 1)`.
    pub decay: f64,
    /// Learning-rate floor.
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            patience: 7,
            decay: 0.7,
            min_lr: 2e-4,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.patience == 0 {
            return Err("scheduler patience must be at least 1".into());
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(format!("scheduler decay {} outside (0, 1)", self.decay));
        }
        if self.min_lr < 0.0 {
            return Err("scheduler min_lr must be non-negative".into());
        }
        Ok(())
    }
}

/// Decays the learning rate by `decay` after `patience` consecutive
/// epochs without a strictly lower monitored value, floored at
/// `min_lr`. The rate never increases.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    lr: f64,
    best: Option<f64>,
    stale_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig, initial_lr: f64) -> Self {
        PlateauScheduler {
            config,
            lr: initial_lr.max(config.min_lr),
            best: None,
            stale_epochs: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's monitored value (lower is better) and returns
    /// the learning rate to use next.
    pub fn observe(&mut self, value: f64) -> f64 {
        match self.best {
            Some(best) if value < best => {
                self.best = Some(value);
                self.stale_epochs = 0;
            }
            Some(_) => {
                self.stale_epochs += 1;
                if self.stale_epochs >= self.config.patience {
                    self.lr = (self.lr * self.config.decay).max(self.config.min_lr);
                    self.stale_epochs = 0;
                }
            }
            None => self.best = Some(value),
        }
        self.lr
    }
}
