use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("object has zero extent on its longest axis")]
    ZeroExtent,

    #[error("mesh has no non-degenerate faces")]
    DegenerateMesh,

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("requested {requested} points but the cloud only has {available}")]
    CountExceedsPoints { requested: usize, available: usize },

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate 6D rotation representation")]
    DegenerateRotation,

    #[error("matrix is not a proper rotation (max deviation {0:.3e})")]
    NotOrthonormal(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("assembly graph disconnected at step {step}: components {components:?}")]
    Disconnected {
        step: usize,
        components: Vec<Vec<usize>>,
    },

    #[error("invalid assembly order: {0}")]
    InvalidOrder(String),

    #[error("cloud has {points} points, need at least {needed} for the k-NN graph")]
    TooFewPoints { points: usize, needed: usize },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: String, found: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite loss in batch {batch}")]
    NanLoss { batch: usize },

    #[error("asset generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
