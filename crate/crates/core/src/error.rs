use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error class used by the command line front-end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Capacity,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Param(_) => "param",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Domain(_) => "domain",
            Error::Undefined(_) => "undefined",
            Error::Precondition(_) => "precondition",
            Error::Capacity(_) => "capacity",
            Error::DegenerateTarget(_) => "degenerate-target",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Capacity(_) => Category::Capacity,
            Error::Config(_) | Error::Param(_) => Category::Usage,
            _ => Category::Data,
        }
    }
}
