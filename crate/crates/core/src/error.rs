use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its contract. `field` is a dotted path.
    #[error("invalid config at `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// p_0 = 0 makes power adjustment undefined.
    #[error("channel unusable: same-slot absorption fraction p_0 is zero")]
    ZeroSameSlotFraction,

    #[error("eye diagram has no {0} traces")]
    MissingBitClass(&'static str),

    #[error("degenerate eye: {0}")]
    DegenerateEye(String),

    #[error("replication {index} failed: {source}")]
    Replication {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short category name, used by the CLI for exit codes and messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidConfig { .. } | Error::InvalidArgument(_) | Error::Parse(_) => "config",
            Error::IndexOutOfRange { .. } => "argument",
            Error::ZeroSameSlotFraction | Error::MissingBitClass(_) | Error::DegenerateEye(_) => {
                "model"
            }
            Error::Replication { source, .. } => source.category(),
            Error::Io { .. } | Error::Csv(_) => "io",
        }
    }
}
