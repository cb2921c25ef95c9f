//! A small dense classifier: data loading, training and evaluation.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::store::StoreError;

pub mod data;
pub mod metrics;
pub mod net;
pub mod train;

pub use data::{gaussian_blobs, BlobSpec, Dataset};
pub use metrics::{evaluate, metrics_from_labels, ClassMetrics, PerClass};
pub use net::{load_model, save_model, Activation, Architecture, DenseLayer, DenseNet};
pub use train::{fine_tune, train, Optimizer, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dataset: {0}")]
    Data(String),
    #[error("idx: {0}")]
    Idx(String),
    #[error("{0}: {1}")]
    Io(PathBuf, io::Error),
    #[error(transparent)]
    Stream(#[from] io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("architecture: {0}")]
    Arch(String),
    #[error("expected {expected} columns, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("training config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
}

/// Layer sizes of the default classifier: 64 inputs, two ReLU layers, 4
/// classes.
pub const DESK_SIZES: [usize; 4] = [64, 256, 128, 4];

/// Default layer for embedding and activation capture.
pub const DESK_LAYER: &str = "dense1.kernel";

/// Epochs for the post-embedding fine-tune and for the attack.
pub const DESK_FINE_TUNE_EPOCHS: usize = 1;
pub const DESK_ATTACK_EPOCHS: usize = 1;

/// Synthetic data for the default pipeline: four classes whose
/// within-class variation spans a 2-dimensional subspace of 64 features.
pub fn desk_blobs(seed: u64) -> BlobSpec {
    BlobSpec { classes: 4, dim: 64, per_class: 2000, spread: 0.12, latent: 2, seed }
}

pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig { optimizer: Optimizer::adam(), learning_rate: 1e-4, batch_size: 64, epochs: 15, seed }
}

/// First 70% of rows for training, the rest held out.
pub fn train_test_split(data: &Dataset) -> (Dataset, Dataset) {
    let cut = data.len() * 7 / 10;
    (data.slice(0, cut), data.slice(cut, data.len()))
}
