use thiserror::Error;

/// Errors raised across the survey pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("codebook invalid: {0}")]
    Codebook(String),

    #[error("unknown field `{0}`")]
    UnknownField(String),

    #[error("row {row}: label `{label}` is not a level of field `{field}`")]
    UnknownLabel { row: usize, field: String, label: String },

    #[error("row {row}: ordinal {value} out of range 1..={max} for field `{field}`")]
    OrdinalOutOfRange { row: usize, field: String, value: i64, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("field `{0}` has no observed values")]
    NeverObserved(String),

    #[error("model fitting failed: {0}")]
    Fit(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("could not parse response: {0}")]
    Parse(String),

    #[error("audit response rejected: {0}")]
    Audit(String),

    #[error("sanity gate failed: {0}")]
    Gate(String),

    #[error("key mismatch: {0}")]
    KeyMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
