use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value violates a documented invariant (boxes, layouts, edits).
    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },

    /// Model or run configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied an argument outside the operation's domain.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error in video `{video_id}`, field `{field}`: {reason}")]
    Parse {
        video_id: String,
        field: String,
        reason: String,
    },

    #[error("non-finite {loss} loss at step {step} (batch seed {batch_seed:#018x})")]
    NonFinite {
        step: u64,
        loss: &'static str,
        batch_seed: u64,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn validation(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Parse { .. } => "parse",
            Error::NonFinite { .. } => "non-finite",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    /// Whether the error stems from bad user input rather than a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Config(_) | Error::Input(_) | Error::Parse { .. }
        )
    }
}
