use std::path::PathBuf;

use crate::dataset::Label;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image of {height}x{width} is too small to trim {trim_px} px from each side")]
    ImageTooSmall {
        height: usize,
        width: usize,
        trim_px: usize,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {msg}", path.display())]
    Decode { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input violated a shape, range or provenance contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("not enough {label} records: {available} available, {requested} requested")]
    InsufficientRecords {
        label: Label,
        available: usize,
        requested: usize,
    },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("non-finite value in {term} ({value})")]
    Divergence { term: String, value: f64 },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::ImageTooSmall { .. }
            | Error::Io { .. }
            | Error::Decode { .. }
            | Error::Contract(_)
            | Error::InsufficientRecords { .. }
            | Error::Format { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::Tensor(_) => 1,
        }
    }
}
