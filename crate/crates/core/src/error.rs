use thiserror::Error;

use crate::space::CellPosition;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid search space config: {0}")]
    InvalidConfig(String),

    #[error("cell {0} is not part of the search space")]
    UnknownPosition(CellPosition),

    #[error("operator `{0}` is not in the configured operator set")]
    UnknownOperator(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("latency table is missing {} entries, first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or("-"))]
    MissingLatency(Vec<String>),

    #[error("latency table lookup miss: {0}")]
    LookupMiss(String),

    #[error("regularizer weights undefined: {0}")]
    DegenerateSensitivity(String),

    #[error("invalid genotype: {}", .0.join("; "))]
    InvalidGenotype(Vec<String>),

    #[error("genotype cannot be encoded in a shared-cell lattice: {0}")]
    Unrepresentable(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("{0}")]
    Invalid(String),

    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::UnknownPosition(_) => "unknown_position",
            Error::UnknownOperator(_) => "unknown_operator",
            Error::Shape(_) => "shape",
            Error::MissingLatency(_) => "missing_latency",
            Error::LookupMiss(_) => "lookup_miss",
            Error::DegenerateSensitivity(_) => "degenerate_sensitivity",
            Error::InvalidGenotype(_) => "invalid_genotype",
            Error::Unrepresentable(_) => "unrepresentable",
            Error::Diverged { .. } => "diverged",
            Error::Invalid(_) => "invalid",
            Error::Csv { .. } => "csv",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
