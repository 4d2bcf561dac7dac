use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("insufficient statistics: {0}")]
    Statistics(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("undefined divergence: {0}")]
    UndefinedDivergence(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("stream exhausted")]
    Exhausted,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, reason: impl ToString) -> Self {
        Error::Format {
            what,
            reason: reason.to_string(),
        }
    }
}
