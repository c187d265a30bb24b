//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement. `layer` names the layer identity
    /// when the mismatch is attributable to one.
    #[error("shape mismatch at {layer}: {detail}")]
    Shape { layer: String, detail: String },

    /// A forward value or gradient went NaN/inf.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// The FLOP budget cannot be met even at minimum widths.
    #[error("budget infeasible: minimum achievable cost {min_flops} exceeds budget {budget}")]
    BudgetInfeasible { min_flops: u64, budget: u64 },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape { layer: layer.into(), detail: detail.into() }
    }
}
