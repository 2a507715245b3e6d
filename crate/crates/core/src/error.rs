use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum CopeError {
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("vocabulary error: token id {token} is not below vocabulary size {vocab_size}")]
    Vocabulary { token: u32, vocab_size: usize },

    #[error("unsupported modality: domain {domain} has no {modality} pathway")]
    UnsupportedModality { domain: String, modality: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CopeError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CopeError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the filesystem rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, CopeError::Io(_))
    }
}

pub type Result<T, E = CopeError> = std::result::Result<T, E>;
