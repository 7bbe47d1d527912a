use thiserror::Error;

/// Errors raised across the simulator, optimizer and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("invalid value for `{0}`: {1}")]
    InvalidValue(String, String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (min eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("stream ({stream}, subcarrier {subcarrier}) has positive power but a zero channel")]
    ZeroChannel { stream: usize, subcarrier: usize },
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("gradient was computed for a different subcarrier set: {0}")]
    StaleGradient(String),
    #[error("index {index} out of range for dataset of {len} realizations")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("missing checkpoint for method {0}")]
    MissingCheckpoint(String),
    #[error("all {0} runs in the batch failed")]
    AllRunsFailed(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
