use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// The target needs more frames than the posteriorgram provides.
    #[error("infeasible target: needs at least {required} frames, got {available}")]
    InfeasibleTarget { required: usize, available: usize },

    #[error("brute-force CTC guard exceeded: {alignments} alignments (limit {limit})")]
    GuardExceeded { alignments: u128, limit: u128 },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            Error::Shape { .. } => 3,
            Error::InfeasibleTarget { .. }
            | Error::GuardExceeded { .. }
            | Error::Format { .. }
            | Error::Data(_)
            | Error::Io { .. } => 2,
        }
    }
}
