use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("degenerate vector")]
    DegenerateVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("incomplete attribute table: missing class {0}")]
    IncompleteAttributeTable(usize),

    #[error("attribute out of range: {value} for class {class}")]
    AttributeOutOfRange { class: usize, value: f64 },

    #[error("duplicate class {0}")]
    DuplicateClass(usize),

    #[error("degenerate attribute table: all pairwise discrepancies are equal")]
    DegenerateAttributeTable,

    #[error("invalid margin {value} at ({row}, {col})")]
    InvalidMargin { row: usize, col: usize, value: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("weight column {column} is not unit-norm (norm {norm})")]
    NonUnitWeight { column: usize, norm: f64 },

    #[error("theta {0} outside [0, pi]")]
    AngleOutOfRange(f64),

    #[error("stale or mismatched activation cache")]
    StaleCache,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unreadable checkpoint: {0}")]
    UnreadableCheckpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            line,
            message: message.into(),
        }
    }
}
