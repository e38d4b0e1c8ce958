use thiserror::Error;

/// Errors raised across model construction, estimation and replication.
#[derive(Debug, Error)]
pub enum BetelError {
    #[error("unknown moment family `{0}`")]
    UnknownFamily(String),
    #[error("inconsistent model declaration: {0}")]
    InvalidModel(String),
    #[error("data column `{0}` not found")]
    MissingColumn(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("parameter point has {got} coordinates, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite moment value at row {row}, coordinate {coordinate}")]
    NonFiniteMoment { row: usize, coordinate: usize },
    #[error("models are not comparable: {0}")]
    NotComparable(String),
    #[error("ETEL estimate failed: {0}")]
    EstimationFailed(String),
    #[error("sample second-moment matrix of the moments is singular")]
    SingularDelta,
    #[error("moment Jacobian is rank deficient")]
    RankDeficientGamma,
    #[error("mode search failed: {0}")]
    ModeSearchFailed(String),
    #[error("initial point has zero posterior density")]
    InfeasibleStart,
    #[error("posterior ordinate denominator is zero; proposal is badly tailored")]
    DegenerateOrdinate,
    #[error("population dual is unbounded at this parameter (hull failure)")]
    PopulationHullFailure,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid DGP specification: {0}")]
    InvalidDgp(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl BetelError {
    /// Whether the error stems from configuration or input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            BetelError::UnknownFamily(_)
                | BetelError::InvalidModel(_)
                | BetelError::MissingColumn(_)
                | BetelError::InvalidData(_)
                | BetelError::DimensionMismatch { .. }
                | BetelError::NotComparable(_)
                | BetelError::Config(_)
                | BetelError::InvalidDgp(_)
                | BetelError::Io(_)
                | BetelError::Csv(_)
                | BetelError::Json(_)
                | BetelError::Toml(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, BetelError>;
