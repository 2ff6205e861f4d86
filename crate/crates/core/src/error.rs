use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FaceError>;

#[derive(Debug, Error)]
pub enum FaceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate time domain: all observed times equal {0}")]
    DegenerateDomain(f64),

    #[error("value {value} outside the domain [0, 1]")]
    OutOfDomain { value: f64 },

    #[error("only {distinct} distinct observation times for {requested} interior knots; use fewer knots")]
    TooFewDistinctTimes { distinct: usize, requested: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance is not identifiable: every subject has a single observation")]
    NotIdentifiable,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("unsupported Matern order nu = {0}")]
    UnsupportedOrder(f64),

    #[error("unknown subject id {0:?}")]
    UnknownSubject(String),

    #[error("problem too large for dense evaluation: N = {n} exceeds {limit}")]
    TooLarge { n: usize, limit: usize },
}
