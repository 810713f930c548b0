use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate treatment arm: {0}")]
    DegenerateArm(String),
    #[error("bound error: {0}")]
    Bound(String),
    #[error("rank deficiency: {0}")]
    RankDeficient(String),
    #[error("separation: {0}")]
    Separation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
