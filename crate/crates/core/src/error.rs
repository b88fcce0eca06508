use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("encoding error: feature `{feature}` has unseen value `{value}`")]
    Encoding { feature: String, value: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("model plan error: {0}")]
    Plan(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("explainer mode error: {0}")]
    Mode(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
