//! A small CNN with exact gradients, trained with class-weighted
//! cross-entropy and Adam.
//!
//! Everything is `f64`. Parameters live in one flat buffer ([`Params`]) whose
//! layout is fixed by the [`ModelSpec`]; gradients, Adam moments and the
//! checkpoint parameter block all share that layout.

mod checkpoint;
mod gradcheck;
mod loss;
mod model;
mod optim;
mod tensor;
mod train;

use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{compare_gradients, grad_check, relative_error};
pub use loss::{logit_gradient, softmax, weighted_ce_loss, PROB_FLOOR};
pub use model::{backward, forward, Layer, ModelSpec, Network, Params, Shape};
pub use optim::{adam_step, plateau_schedule, plateau_trace, AdamState, PlateauScheduler};
pub use tensor::Tensor;
pub use train::{evaluate, fit, write_log_csv, EpochLog, FitOutcome, Monitor, TrainConfig};

use crate::data::DataError;
use crate::imaging::ImagingError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("training ran no epochs")]
    EmptyTraining,
    #[error("{0} manifest is empty")]
    EmptyManifest(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
