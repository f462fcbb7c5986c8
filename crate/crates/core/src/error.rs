use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm below 1e-12")]
    DegenerateVector,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("transport problem {rows}x{cols} exceeds exact-solver limit; use sinkhorn")]
    UseSinkhorn { rows: usize, cols: usize },
    #[error("marginal totals differ: {mu_total} vs {nu_total}")]
    MarginalMismatch { mu_total: f64, nu_total: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("all importance scores are zero and no floor is applied")]
    DegenerateWeights,
    #[error("output segment {segment} has zero attention mass on source tokens")]
    ZeroSourceMass { segment: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("checkpoint integrity: {0}")]
    Checksum(String),
    #[error("PDR undefined: clean ROUGE-L is zero")]
    UndefinedPdr,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
