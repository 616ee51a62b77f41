use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Data(#[from] deepatrophy_core::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;
