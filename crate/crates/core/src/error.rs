use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in input")]
    NonFinite,

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("embeddings use different kernels")]
    KernelMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("all samples are identical, the median heuristic is undefined; set the kernel bandwidth explicitly")]
    DegenerateBandwidth,

    #[error("singular system in {context}; use a positive ridge")]
    Singular { context: String },

    #[error("simplex QP did not converge after {iterations} iterations (kkt residual {kkt_residual:.3e})")]
    QpNotConverged {
        iterations: usize,
        kkt_residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("invalid node id {0}")]
    InvalidNode(usize),

    #[error("nodes {0} and {1} are disconnected in the network")]
    Disconnected(usize, usize),

    #[error("{0}")]
    Validation(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of a numerical routine (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::QpNotConverged { .. } | Error::DegenerateBandwidth
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
