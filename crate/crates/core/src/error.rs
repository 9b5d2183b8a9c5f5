use std::path::PathBuf;

/// Errors raised anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("insufficient input: {0}")]
    InsufficientInput(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate trial id {0}")]
    Duplicate(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("numeric fault: {0}")]
    NumericFault(String),
    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("unsupported front end: {0}")]
    UnsupportedFrontend(String),
    #[error("missing inputs for {} trial(s): {}", .0.len(), .0.join(", "))]
    MissingTrials(Vec<String>),
    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Broad failure class, used by the command line to pick an exit code.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::KindMismatch { .. } | Error::UnsupportedFrontend(_) | Error::Shape(_) => {
                ErrorCategory::Compatibility
            }
            Error::NumericFault(_) => ErrorCategory::Numeric,
            _ => ErrorCategory::ConfigOrIo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    ConfigOrIo,
    Compatibility,
    Numeric,
}

pub type Result<T> = std::result::Result<T, Error>;
