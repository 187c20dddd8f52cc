//! Two-stage fine-tuning: a frozen-backbone warm-up that trains only the
//! head, then joint training with a reduced backbone learning rate.

mod loss;
mod optim;
mod runner;
mod schedule;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::error::ErrorKind;
use crate::model::{ModelError, Stage};
use crate::transforms::{Pipeline, TransformError};

pub use loss::{bounded_smooth_l1, smooth_l1, smooth_l1_grad, LossConfig, LossOutput};
pub use optim::{AdamW, AdamWConfig, ParamGroup};
pub use runner::{
    param_group_of, revalidate, run, run_observed, RunOptions, TrainOutcome, TrainState, BACKBONE_GROUP,
    HEAD_GROUP,
};
pub use schedule::{clip_gradients, clip_module_gradients, cosine_lr};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training spec: {0}")]
    InvalidSpec(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at batch indices {indices:?}")]
    NonFiniteLoss { indices: Vec<usize> },
    #[error("non-finite gradient norm")]
    NonFiniteGradient,
    #[error("validation MAE is not finite at epoch {epoch}; last good checkpoint kept")]
    NonFiniteValidation { epoch: usize },
    #[error("learning-rate schedule: {0}")]
    Schedule(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TrainError::InvalidSpec(_) | TrainError::Schedule(_) | TrainError::Resume(_) => ErrorKind::Config,
            TrainError::EmptyBatch => ErrorKind::Data,
            TrainError::NonFiniteLoss { .. }
            | TrainError::NonFiniteGradient
            | TrainError::NonFiniteValidation { .. } => ErrorKind::Numerical,
            TrainError::Model(e) => e.kind(),
            TrainError::Dataset(e) => e.kind(),
            TrainError::Transform(_) => ErrorKind::Data,
            TrainError::Io { .. } => ErrorKind::Io,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub backbone_lr_mult: f64,
    pub clip_norm: f64,
    pub loss_beta: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub transform: Pipeline,
    /// Each stage anneals down to `lr_min_factor · lr`.
    pub lr_min_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Also score the validation split with the deterministic eval transform.
    pub deterministic_val: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            freeze_epochs: 5,
            backbone_lr_mult: 0.10,
            clip_norm: 2.0,
            loss_beta: 1.0,
            weight_decay: 0.01,
            seed: 42,
            transform: Pipeline::ResizeColorjitFlipBlur,
            lr_min_factor: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            deterministic_val: true,
            eval_batch_size: 64,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidSpec(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.epochs == 0 || self.freeze_epochs > self.epochs {
            return bad("need epochs >= freeze_epochs >= 0 and epochs >= 1");
        }
        if !(self.backbone_lr_mult > 0.0 && self.backbone_lr_mult.is_finite()) {
            return bad("backbone_lr_mult must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.loss_beta >= 0.0 && self.loss_beta.is_finite()) {
            return bad("loss_beta must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lr_min_factor) {
            return bad("lr_min_factor must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid AdamW moments configuration");
        }
        Ok(())
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch <= self.freeze_epochs {
            Stage::FrozenBackbone
        } else {
            Stage::Full
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    /// MAE of the training-mode predictions seen during the epoch.
    pub train_mae: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub val_mae_deterministic: Option<f64>,
    /// Learning rates at the first step of the epoch.
    pub lr_head: f64,
    pub lr_backbone: f64,
    /// Mean pre-clip global gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub throughput: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Monitor {
    ValMae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MonitorMode {
    Minimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPolicy {
    pub monitor: Monitor,
    pub mode: MonitorMode,
    pub best_epoch: usize,
    pub best_value: f64,
}

impl Default for CheckpointPolicy {
    fn default() -> Self {
        CheckpointPolicy {
            monitor: Monitor::ValMae,
            mode: MonitorMode::Minimize,
            best_epoch: 0,
            best_value: f64::INFINITY,
        }
    }
}

impl CheckpointPolicy {
    /// Returns true when `value` strictly improves on the best so far.
    pub fn update(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best_value {
            self.best_value = value;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }
}
