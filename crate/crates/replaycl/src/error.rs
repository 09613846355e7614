//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset preset `{0}`")]
    UnknownDataset(String),

    #[error("{num_tasks} tasks do not divide {num_classes} classes for `{dataset}`")]
    BadTaskSplit {
        dataset: String,
        num_classes: usize,
        num_tasks: usize,
    },

    #[error("task index {t} out of range 1..={max}")]
    TaskOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("class label {class} out of range (num classes {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("dataset file missing or corrupt: {0}")]
    DataFile(String),

    #[error("download failed for {url}: {reason}")]
    Download { url: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("empty test set for task {0}")]
    EmptyTestSet(usize),

    #[error("non-consecutive task growth: expected {expected}, got {got}")]
    NonConsecutiveTask { expected: usize, got: usize },

    #[error("replay buffer missing for task {0}")]
    MissingReplay(usize),

    #[error("prior private module {0} is not frozen")]
    UnfrozenPrior(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("plotting failed: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
