use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("target accuracy {target} not reached within {epochs} epochs (best {best:.4})")]
    TargetAccuracyNotReached {
        target: f64,
        epochs: usize,
        best: f64,
    },

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("ground-truth bias labels are not available")]
    MissingGroundTruth,

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("persistence error for {path}: {detail}")]
    Persistence { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
