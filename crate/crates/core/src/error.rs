use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("loss is not connected to any differentiable input")]
    Detached,

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("factor {name} = {value} is outside [{lo}, {hi}]")]
    FactorRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("task is unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
