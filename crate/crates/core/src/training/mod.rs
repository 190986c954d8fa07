//! Decoder and probe training on frozen features.

pub mod fit;
pub mod loss;
pub mod run;
pub mod schedule;

use serde::{Deserialize, Serialize};

use crate::dataset::AugmentSpec;
use crate::error::{Result, ValidationError};

pub use fit::{evaluate_loss, fit, predict, train_linear_probe, Adam, Control, EpochRecord, FeatureSet, History, LinearProbe, StopReason};
pub use loss::{bce_with_logits, pixel_bce_loss};
pub use run::{prepare_features, train, train_cls_probe, ProbeOutcome, TrainOutcome, TrainRequest};
pub use schedule::{PlateauScheduler, ScheduleConfig, ScheduleEvent, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Per-pixel BCE on decoder logits.
    PixelBce,
    /// Per-image BCE on a linear probe over the global token.
    ImageBce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub stop_lr: f64,
    pub improvement_tolerance: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Applied once per image before feature extraction.
    pub augmentations: Vec<AugmentSpec>,
    pub zero_init_final: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        Self {
            initial_lr: s.initial_lr,
            plateau_factor: s.factor,
            plateau_patience: s.patience,
            stop_lr: s.stop_lr,
            improvement_tolerance: s.tolerance,
            batch_size: 32,
            max_epochs: 300,
            seed: 0,
            loss: LossKind::PixelBce,
            augmentations: Vec::new(),
            zero_init_final: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            initial_lr: self.initial_lr,
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            stop_lr: self.stop_lr,
            tolerance: self.improvement_tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate().map_err(ValidationError::InvalidParameter)?;
        if self.batch_size == 0 {
            return Err(ValidationError::InvalidParameter("batch size must be positive".into()).into());
        }
        if self.max_epochs == 0 {
            return Err(ValidationError::InvalidParameter("epoch cap must be positive".into()).into());
        }
        for a in &self.augmentations {
            a.validate()?;
        }
        Ok(())
    }
}
