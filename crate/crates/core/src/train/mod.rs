//! Pretraining loop: configuration, optimizer, per-step objective assembly,
//! checkpointing and metrics.

mod optim;
mod run;
mod step;

use serde::{Deserialize, Serialize};

pub use optim::{cosine_lr, sgd_step, OptimizerState};
pub use run::{load_checkpoint, run_pretraining, train_epoch, EpochMetrics, RunOutcome, StepRecord, TrainState};
pub use step::{make_views, train_step, StepOutput, ViewBatch};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::fusion::GateConfig;
use crate::model::{HeadSet, ModelConfig};
use crate::objective::{LossWeights, Schedule, ScheduleConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0: only at
    /// the end).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub schedule: ScheduleConfig,
    pub gate: GateConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::TrustSslAdditive,
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-6,
            seed: 1,
            checkpoint_every: 10,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            gate: GateConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.gate.validate()?;
        self.augment.validate()?;
        Schedule::new(self.schedule.clone(), self.epochs)?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} < 2", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if self.augment.size != self.model.image_size {
            return Err(Error::Config(format!(
                "augment.size {} differs from model.image_size {}",
                self.augment.size, self.model.image_size
            )));
        }
        Ok(())
    }

    /// Model dimensions after variant overrides.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if let Some(t) = self.variant.forced_num_factors() {
            m.num_factors = t;
        }
        m
    }

    pub fn heads(&self) -> HeadSet {
        self.variant.heads()
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.schedule.clone(), self.epochs)
    }
}
