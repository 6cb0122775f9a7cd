use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("treated unit `{0}` not found")]
    MissingTreated(String),

    #[error("intervention label `{0}` not found in header")]
    MissingTimeLabel(String),

    #[error("treated unit is unobserved at pre-intervention period `{0}`")]
    MissingPreTreated(String),

    #[error("non-numeric cell `{value}` at unit `{unit}`, period `{period}`")]
    NonNumeric {
        unit: String,
        period: String,
        value: String,
    },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("panel has no observed entries")]
    EmptyPanel,

    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }
}
