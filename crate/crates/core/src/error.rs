use thiserror::Error;

/// Errors raised by the toolbox.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("time {t} is not aligned to the grid step {dt}")]
    GridMisaligned { t: f64, dt: f64 },

    #[error("comparison function is not of the required class: {0}")]
    NotClass(String),

    #[error("Osgood conditions not certified: {0}")]
    OsgoodNotCertified(String),

    #[error("simulation produced a non-finite state at t = {t}")]
    BlowUp { t: f64 },

    #[error("{what} leaves its box: {detail}")]
    BoxViolation { what: &'static str, detail: String },

    #[error("unknown model '{0}'")]
    UnknownModel(String),

    #[error("observer error: {0}")]
    Observer(String),

    #[error("observer consistency check failed: mismatch {mismatch:e} exceeds {limit:e}")]
    Inconsistent { mismatch: f64, limit: f64 },

    #[error("certificate rejected: {0}")]
    CertificateRejected(String),

    #[error("search budget exhausted before any evaluation")]
    BudgetExhausted,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
