use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("covariance is degenerate: every eigenvalue is at the floor")]
    DegenerateCovariance,

    #[error("row {0} has zero variance")]
    ZeroVarianceRow(usize),

    #[error("matrix has an all-zero spectrum")]
    ZeroMatrix,

    #[error("eigendecomposition did not converge")]
    EigenFailure,

    #[error("cannot select {r} of {k} cliques per row")]
    InvalidR { r: usize, k: usize },

    #[error("exhaustive search over {combinations} assignments exceeds the limit of {limit}")]
    TooLarge { combinations: f64, limit: u64 },

    #[error("batch {0} selects only empty cliques")]
    EmptyBatch(usize),

    #[error("empty score list")]
    EmptyInput,

    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical routines rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateCovariance
                | Error::ZeroVarianceRow(_)
                | Error::ZeroMatrix
                | Error::EigenFailure
                | Error::DegenerateProblem(_)
        )
    }
}
