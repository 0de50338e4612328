use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{name} = {value} must lie in the open interval (0, 1)")]
    ProbabilityDomain { name: &'static str, value: f64 },

    #[error("invalid sampler: {0}")]
    InvalidSampler(String),

    #[error("subset must contain at least one scenario")]
    EmptySubset,

    #[error("scenario index {index} out of range for a cloud of {len} points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid stop rule: {0}")]
    InvalidStopRule(String),

    #[error("time index {t} outside 1..={horizon}")]
    TimeOutOfRange { t: usize, horizon: usize },

    /// A constant buffer term leaves a negative right-hand side.
    #[error("buffer {value} exceeds unity at time step {time}, constraint row {constraint}")]
    BufferExceedsUnity {
        time: usize,
        constraint: usize,
        value: f64,
    },

    #[error("constraint set violates normalization: {0}")]
    InvalidConstraints(String),

    #[error("invalid cost: {0}")]
    InvalidCost(String),

    #[error("solver backend failed: {0}")]
    Backend(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn config_err<T>(field: impl Into<String>, message: impl Into<String>) -> Result<T> {
    Err(Error::Config { field: field.into(), message: message.into() })
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::DimensionMismatch(msg.into()))
}
