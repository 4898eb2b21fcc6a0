use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range 0..{len}")]
    Range {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Two conditions claim the same latent frame.
    #[error("layout conflict{}: {details}", segment.map(|s| format!(" in segment {s}")).unwrap_or_default())]
    LayoutConflict { segment: Option<usize>, details: String },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid scene: {0}")]
    Spec(String),

    #[error("schema violation at `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
