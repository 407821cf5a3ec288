use thiserror::Error;

/// Errors produced by model construction, scenario validation, and the
/// limit-search harness.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The severity floor of a limit search is already nonfunctional, so
    /// there is no limit to bracket.
    #[error("baseline broken: scenario is nonfunctional at severity {severity}")]
    BaselineBroken { severity: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
