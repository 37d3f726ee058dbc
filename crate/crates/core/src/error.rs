use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}: column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("contract error: {0}")]
    Contract(String),

    /// Matrix factorization failed even at the largest jitter tried.
    #[error("numerical error: factorization failed (last jitter tried {jitter:e})")]
    Factorization { jitter: f64 },

    #[error("non-finite gradient in block `{0}`")]
    NonFiniteGradient(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that originate in the numerics (factorizations,
    /// gradients, sampler health) rather than in inputs or plumbing.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Factorization { .. } | Error::NonFiniteGradient(_) | Error::Sampler(_)
        )
    }
}
