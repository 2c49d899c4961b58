use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A cell that could not be read as a number.
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// Input that violates a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Formula, transform script or constraint text that does not follow the grammar.
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    /// A decomposition, solve or optimization that failed numerically.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The sampler produced a non-finite draw.
    #[error("sampler diverged at iteration {iteration}: {message}")]
    Divergence { iteration: u64, message: String },

    #[error("optimizer did not converge after {evaluations} evaluations (best deviance {best})")]
    NoConvergence { evaluations: usize, best: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for failures caused by the numbers rather than by the input's shape.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Divergence { .. } | Error::NoConvergence { .. }
        )
    }
}
