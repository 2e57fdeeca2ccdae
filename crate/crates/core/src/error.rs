use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The empirical Jacobian of the moment in θ is numerically zero, so the
    /// moment equation does not identify θ on this sample.
    #[error("degenerate jacobian: |sum e*w| = {denominator:e} below threshold for n = {n}")]
    DegenerateJacobian { denominator: f64, n: usize },

    #[error("unsupported multi-index {alpha:?}: {reason}")]
    UnsupportedAlpha {
        alpha: [u8; 4],
        reason: &'static str,
    },

    #[error("empty sample: {0}")]
    EmptySample(&'static str),

    #[error("ground-truth instance required for {0}")]
    MissingTruth(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
