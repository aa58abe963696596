use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller input: dimension mismatch, infeasible point, malformed file.
    #[error("input error: {0}")]
    Input(String),
    /// A numeric routine hit a singular matrix or non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An object was used in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),
    /// An iterative method ran out of budget.
    #[error("{what} did not converge (last gradient norm {grad_norm:.3e})")]
    Convergence { what: String, grad_norm: f64 },
    /// The robust solver failed on one sample of a batch.
    #[error("solver failed on sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line driver: 2 for input
    /// problems, 1 for numeric or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Io { .. } | Error::Csv(_) | Error::Json(_) | Error::State(_) => 2,
            Error::Numeric(_) | Error::Convergence { .. } => 1,
            Error::Sample { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
