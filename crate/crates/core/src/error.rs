//! Crate-wide error type and the CLI exit-code mapping.

use thiserror::Error;

use crate::augment::PolicyError;
use crate::expharness::ExperimentError;
use crate::imagery::ImageryError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::model::{CheckpointError, ModelError};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Exit status for a validation failure (bad config, bad input data).
pub const EXIT_VALIDATION: i32 = 1;
/// Exit status for I/O or numeric failures at run time.
pub const EXIT_RUNTIME: i32 = 2;

fn imagery_code(e: &ImageryError) -> i32 {
    match e {
        ImageryError::MissingDirectory(_)
        | ImageryError::Unreadable { .. }
        | ImageryError::Unwritable { .. } => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

fn checkpoint_code(e: &CheckpointError) -> i32 {
    match e {
        CheckpointError::Io { .. } => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Checkpoint(c) => checkpoint_code(c),
        ModelError::Loss(l) => loss_code(l),
        _ => EXIT_VALIDATION,
    }
}

fn loss_code(e: &LossError) -> i32 {
    match e {
        LossError::NonFinite(_) => EXIT_RUNTIME,
        _ => EXIT_VALIDATION,
    }
}

fn train_code(e: &TrainError) -> i32 {
    match e {
        TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => EXIT_RUNTIME,
        TrainError::Imagery(i) => imagery_code(i),
        TrainError::Model(m) => model_code(m),
        TrainError::Loss(l) => loss_code(l),
        _ => EXIT_VALIDATION,
    }
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Imagery(e) => imagery_code(e),
            Error::Model(e) => model_code(e),
            Error::Loss(e) => loss_code(e),
            Error::Train(e) => train_code(e),
            Error::Experiment(e) => match e {
                ExperimentError::Io { .. } => EXIT_RUNTIME,
                ExperimentError::Cell { source, .. } => train_code(source),
                ExperimentError::Imagery(i) => imagery_code(i),
                ExperimentError::Model(m) => model_code(m),
                _ => EXIT_VALIDATION,
            },
            Error::Policy(_) | Error::Metrics(_) => EXIT_VALIDATION,
        }
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Model(e.into())
    }
}
