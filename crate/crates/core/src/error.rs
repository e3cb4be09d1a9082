use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("degenerate affine transform (det = {det:e})")]
    DegenerateTransform { det: f64 },

    #[error("invalid scale {0}")]
    InvalidScale(f64),

    #[error("size error: {0}")]
    Size(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("position ({x}, {y}) out of bounds")]
    OutOfBounds { x: f64, y: f64 },

    #[error("too few matches: {got} (need at least {need})")]
    TooFewMatches { got: usize, need: usize },

    #[error("insufficient candidates: {0}")]
    InsufficientCandidates(String),

    #[error("outlier model error: {0}")]
    Model(String),

    #[error("no inlier structure: max outlier-normal value {0} is not positive")]
    NoInlierStructure(f64),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
