use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("label of length {label_len} needs at least {required} frames, got {frames}")]
    Infeasible {
        frames: usize,
        label_len: usize,
        required: usize,
    },

    #[error("enumeration of {alignments} alignments exceeds the limit of {limit}")]
    InstanceTooLarge { alignments: u128, limit: u128 },

    #[error("noise sequence has zero power")]
    ZeroPowerNoise,

    #[error("cache does not match the inputs it is being used with ({0})")]
    StaleCache(&'static str),

    #[error("symbol {0:?} is not in the alphabet")]
    UnknownSymbol(char),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` must be completed first (missing {})", path.display())]
    MissingStage { stage: String, path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
