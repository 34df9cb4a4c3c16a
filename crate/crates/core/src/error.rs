use thiserror::Error;

/// Errors surfaced by the search engine and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The instance is valid but not handled by this solver.
    #[error("unsupported instance: {0}")]
    Unsupported(String),

    /// A configuration value failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A serialized document (policy, checkpoint, manifest) violates its schema.
    #[error("schema violation at `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user input rather than the runtime.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Schema { .. })
            || matches!(self, Error::Json(e) if !e.is_io())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
