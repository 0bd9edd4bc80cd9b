use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("behaviour violates non-disturbance (most negative table entry {min_entry:e})")]
    Disturbing { min_entry: f64 },

    #[error("linear program inconclusive (phase-one residual {residual:e})")]
    LpInconclusive { residual: f64 },

    #[error("rejection sampler acceptance rate {rate:e} after {draws} draws is below the floor")]
    AcceptanceCollapse { rate: f64, draws: u64 },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
