use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants map onto the failure classes the CLI distinguishes: everything
/// except [`Error::NumericContract`] is a validation-style failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate softmax row {row}: every entry is -inf")]
    DegenerateRow { row: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("unsupported container version {0}")]
    Version(u16),

    #[error("resolution error: cannot bin {t_raw} raw steps into {t_norm} bins")]
    Resolution { t_raw: usize, t_norm: usize },

    #[error("partition error: {t_norm} time steps are not divisible into intervals of {interval}")]
    Partition { t_norm: usize, interval: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("negative rate: base rate {base} is below modulation depth {depth}")]
    NegativeRate { base: f64, depth: f64 },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric contract failure: {0}")]
    NumericContract(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
