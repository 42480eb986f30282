use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },
    #[error("non-finite value at {location}")]
    NonFinite { location: String },
    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid morph plan at stage {stage}: {reason}")]
    Plan { stage: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
