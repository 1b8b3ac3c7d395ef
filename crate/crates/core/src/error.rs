use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("inverse transform left an imaginary residue of {0:e}")]
    ImaginaryResidue(f64),

    #[error("log of non-positive value {0}")]
    LogDomain(f64),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("empty mask in {0}")]
    EmptyMask(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),

    #[error("duplicate bank entry for client {client_id}, sample {sample_index}")]
    DuplicateEntry { client_id: u32, sample_index: u32 },

    #[error("client {0} has no bank entries")]
    EmptyClient(u32),

    #[error("client {0} has an empty dataset")]
    EmptyDataset(u32),

    #[error("label is not binary: found value {0}")]
    NonBinaryLabel(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what} at {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            path: path.into(),
            detail: detail.into(),
        }
    }
}
