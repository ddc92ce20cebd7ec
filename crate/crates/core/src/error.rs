use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box {0:?}: width and height must be positive and finite")]
    Degenerate([f64; 4]),
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature key {0} not found")]
    NotFound(u64),
    #[error("feature file format: {0}")]
    Format(String),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("feature file io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("annotation json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scene {image_id}: {message}")]
    Record { image_id: u64, message: String },
    #[error("action registry: {0}")]
    Registry(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("input has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite {term} loss")]
    NonFinite { term: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: {source}")]
    Diverged {
        iteration: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction line {line}: {message}")]
    Prediction { line: usize, message: String },
    #[error("unknown action `{0}` in predictions")]
    UnknownAction(String),
    #[error("predictions io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
