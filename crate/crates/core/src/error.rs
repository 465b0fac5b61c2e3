use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot ingest dataset at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("unknown layer `{name}`; available layers: {}", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("label class {class} out of range for a head with {channels} channels")]
    LabelOutOfRange { class: u32, channels: usize },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    #[error("model adapter failed at grid point (wavelength {wavelength}, orientation {orientation}, phase {phase}): {reason}")]
    AdapterFailure {
        wavelength: f64,
        orientation: f64,
        phase: f64,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config parse error at `{key}`: {message}")]
    ConfigParse { key: String, message: String },

    #[error("{0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
