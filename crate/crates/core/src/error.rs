use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("location `{0}` has records with inconsistent GPS coordinates")]
    InconsistentLocation(String),

    #[error("record `{id}`: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("record `{id}`: image file {path} not found")]
    MissingImage { id: String, path: PathBuf },

    #[error("location `{0}` has UAV records but no satellite record")]
    NoSatellite(String),

    #[error("record `{id}`: cannot read image: {message}")]
    UnreadableImage { id: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("unknown backbone `{name}` (known: {known})")]
    UnknownBackbone { name: String, known: String },

    #[error("backbone `{0}` requested with pretrained weights, but none are available")]
    WeightsUnavailable(String),

    #[error("unknown location id `{0}`")]
    UnknownLocation(String),

    #[error("location `{neighbor}` is not in the neighbour set of `{anchor}`")]
    NotANeighbor { anchor: String, neighbor: String },

    #[error("non-finite loss at step {step} (lr {lr}): {breakdown}")]
    NonFiniteLoss {
        step: u64,
        lr: f64,
        breakdown: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::UnknownBackbone { .. }
            | Error::WeightsUnavailable(_)
            | Error::InvalidCoordinate(_) => ErrorClass::Config,
            // a missing input is bad data; other i/o failures are environmental
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ErrorClass::Data,
            Error::NonFiniteLoss { .. } | Error::Io { .. } => ErrorClass::Runtime,
            _ => ErrorClass::Data,
        }
    }
}
