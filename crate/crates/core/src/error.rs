use thiserror::Error;

/// Errors raised by the grasp toolkit.
#[derive(Debug, Error)]
pub enum NgsError {
    /// Mismatched shapes, missing inputs or inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// A numeric argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A rotation that has no Euler decomposition with all angles in [-pi/2, pi/2].
    #[error("non-canonical rotation: {0}")]
    NonCanonical(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NgsError>;
