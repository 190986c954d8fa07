//! Reduce-on-plateau learning-rate control with a stop threshold.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub stop_lr: f64,
    /// Absolute amount by which a loss must beat the best to count as improvement.
    pub tolerance: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { initial_lr: 1e-3, factor: 0.1, patience: 5, stop_lr: 1e-6, tolerance: 1e-4 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.initial_lr > 0.0 && self.stop_lr > 0.0 && self.stop_lr < self.initial_lr) {
            return Err(format!("need 0 < stop_lr ({}) < initial_lr ({})", self.stop_lr, self.initial_lr));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(format!("plateau factor {} must be in (0, 1)", self.factor));
        }
        if self.patience == 0 {
            return Err("plateau patience must be at least 1".into());
        }
        if !(self.tolerance >= 0.0) {
            return Err("improvement tolerance must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub current_lr: f64,
    pub reductions: u32,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    pub stopped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Plateau,
    Reduced,
    Stop,
}

#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    config: ScheduleConfig,
    state: TrainState,
}

impl PlateauScheduler {
    pub fn new(config: ScheduleConfig) -> Self {
        Self {
            state: TrainState {
                epoch: 0,
                current_lr: config.initial_lr,
                reductions: 0,
                best_val_loss: f64::INFINITY,
                epochs_since_improvement: 0,
                stopped: false,
            },
            config,
        }
    }

    pub fn lr(&self) -> f64 {
        self.state.current_lr
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Feeds one epoch's monitored loss. A non-finite loss never counts as an
    /// improvement. Once `Stop` is returned the learning rate stays at its
    /// last usable value and further calls keep returning `Stop`.
    pub fn step(&mut self, val_loss: f64) -> ScheduleEvent {
        if self.state.stopped {
            return ScheduleEvent::Stop;
        }
        let s = &mut self.state;
        s.epoch += 1;
        if val_loss.is_finite() && val_loss < s.best_val_loss - self.config.tolerance {
            s.best_val_loss = val_loss;
            s.epochs_since_improvement = 0;
            return ScheduleEvent::Improved;
        }
        s.epochs_since_improvement += 1;
        if s.epochs_since_improvement <= self.config.patience {
            return ScheduleEvent::Plateau;
        }
        s.epochs_since_improvement = 0;
        // recompute from the start value so the trajectory is exactly geometric
        let next = self.config.initial_lr * self.config.factor.powi(s.reductions as i32 + 1);
        if next < self.config.stop_lr * (1.0 - 1e-9) {
            s.stopped = true;
            return ScheduleEvent::Stop;
        }
        s.reductions += 1;
        s.current_lr = next;
        ScheduleEvent::Reduced
    }
}
