use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has non-finite coordinates {0:?}")]
    NonFinite([f64; 4]),
    #[error("box {0:?} has zero or negative area")]
    Degenerate([f64; 4]),
    #[error("score {0} outside [0, 1]")]
    Score(f64),
    #[error("expansion {0} must be non-negative")]
    NegativeExpansion(f64),
    #[error("enclosing box of an empty set")]
    Empty,
    #[error("crop size ({0}, {1}) must be positive")]
    CropSize(f64, f64),
}

/// Rejected configuration values.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("annotation {annotation_id} references unknown category {category_id}")]
    UnknownCategory { annotation_id: u64, category_id: u64 },
    #[error("annotation {annotation_id} references unknown image {image_id}")]
    UnknownImage { annotation_id: u64, image_id: u64 },
    #[error("image {0} has non-positive size")]
    ImageSize(u64),
    #[error("split fraction {fraction} of {total} images yields no labeled image")]
    EmptySplit { fraction: f64, total: usize },
    #[error("split: {0}")]
    SplitFile(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("feature length {got} does not match layout length {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("weight length {got} does not match layout length {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("target class {class} outside {classes} classes")]
    TargetClass { class: usize, classes: usize },
    #[error("backend failed on image {image_id}: {message}")]
    Backend { image_id: u64, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("schedule violation: {0}")]
    Schedule(String),
    #[error("labeled set is empty")]
    NoLabeledData,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("detections reference image {0} absent from ground truth")]
    UnknownImage(u64),
    #[error("{0}")]
    Invalid(String),
}
