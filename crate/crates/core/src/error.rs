use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the signature pipeline.
///
/// Variants are grouped so front ends can map them onto coarse categories
/// (usage, data format, contract violation) with [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data format: {0}")]
    Format(String),

    #[error("coordinate ({x}, {y}, {z}) is outside the volume bounds {extent:?}")]
    OutOfBounds { x: u32, y: u32, z: u32, extent: [u32; 3] },

    #[error("no record available: {0}")]
    NoRecord(String),

    #[error("candidate list exhausted after {labels_used} labels with {found} of {target} matches verified")]
    Exhausted {
        labels_used: usize,
        found: usize,
        target: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error category, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    DataFormat,
    Contract,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::DataFormat => "data-format",
            ErrorCategory::Contract => "contract",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::Format(_) | Error::Io { .. } => ErrorCategory::DataFormat,
            Error::Contract(_) | Error::OutOfBounds { .. } | Error::NoRecord(_) | Error::Exhausted { .. } => {
                ErrorCategory::Contract
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
