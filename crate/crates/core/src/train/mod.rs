//! Adam, contrastive pretraining, focal-loss fine-tuning and evaluation.

mod adam;
mod loops;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentPolicy, PolicyError};
use crate::imagery::ImageryError;
use crate::losses::{LossConfig, LossError};
use crate::metrics::MetricsError;
use crate::model::ModelError;

pub use adam::{adam_step, AdamState};
pub use loops::{evaluate, finetune, predict, pretrain};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("gradient has {got} entries, parameters have {expected}")]
    GradientShape { expected: usize, got: usize },
    #[error("no labelled items in the {0} split")]
    NoLabelledItems(&'static str),
    #[error("item {0:?} has no mask")]
    Unlabelled(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub policy: AugmentPolicy,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            epochs: 50,
            seed: 0,
            loss: LossConfig::default(),
            policy: AugmentPolicy::default(),
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be > 0", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} outside (0, 1)"));
            }
        }
        if !(self.adam_eps >= 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps = {} must be >= 0", self.adam_eps));
        }
        if self.early_stop_patience == Some(0) {
            return bad("early_stop_patience must be >= 1".into());
        }
        self.loss.validate()?;
        self.policy.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_iou: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_iou: Option<f64>,
}

impl RunHistory {
    pub(crate) fn push(&mut self, record: EpochRecord) -> bool {
        let improved = match (record.val_iou, self.best_val_iou) {
            (Some(_), None) => true,
            (Some(v), Some(best)) => v > best,
            _ => false,
        };
        if improved {
            self.best_epoch = Some(record.epoch);
            self.best_val_iou = record.val_iou;
        }
        self.records.push(record);
        improved
    }

    /// Same history with wall-clock times zeroed, for comparisons.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.records.iter_mut().for_each(|r| r.wall_ms = 0);
        h
    }

    /// One JSON object per epoch.
    pub fn write_json_lines(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
