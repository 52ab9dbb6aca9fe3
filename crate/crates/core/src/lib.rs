//! Skin lesion classification pipeline at desk scale.
//!
//! The crate is split along the stages of the pipeline:
//!
//! - [`imaging`]: white-patch retinex color constancy, resizing, normalization
//!   and the seeded train/eval augmentation chains.
//! - [`data`]: ground-truth CSV ingestion, class distributions, stratified
//!   splits, class weights and batch samplers (shuffled and balanced).
//! - [`nn`]: a small from-scratch CNN in `f64` with exact analytic gradients,
//!   the class-weighted cross-entropy loss, Adam, reduce-on-plateau scheduling,
//!   best-checkpoint training and the checkpoint file format.
//! - [`metrics`]: confusion matrix, per-class precision/recall/F1, macro and
//!   micro averages and the classification report.
//! - [`ensemble`]: prediction CSV I/O and probability averaging.
//!
//! Per-sample work (augmentation, forward/backward, evaluation) runs through
//! [`parallel::Exec`]. With the `parallel` feature (default) it is backed by
//! rayon; without it everything runs sequentially. Results are bit-identical
//! either way because reductions always happen in sample order.

pub mod data;
pub mod ensemble;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rng;

pub use data::{ClassLabel, Manifest, NUM_CLASSES};
pub use ensemble::PredictionSet;
pub use imaging::{AugmentConfig, ImageF, ImageU8};
pub use metrics::{ClassificationReport, ConfusionMatrix};
pub use parallel::Exec;
