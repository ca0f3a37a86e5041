use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped into coarse categories (see [`Error::category`]) so
/// front ends can map them onto exit codes without matching on messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error in {field}: {reason}")]
    Format { field: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error at step {step}: {reason}")]
    Numeric { step: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error class used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::State(_) | Error::Contract(_) => {
                ErrorCategory::Usage
            }
            Error::Numeric { .. } => ErrorCategory::Numeric,
            Error::Dimension { .. } | Error::Format { .. } | Error::Data(_) | Error::Io { .. } => {
                ErrorCategory::Data
            }
        }
    }

    /// Short stable tag naming the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Data(_) => "data",
            Error::Numeric { .. } => "numeric",
            Error::Io { .. } => "io",
        }
    }
}
