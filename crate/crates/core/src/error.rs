use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KseError> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum KseError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate layer: {0}")]
    DegenerateLayer(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("kernel budget {budget} exceeds the {available} available kernels")]
    Budget { budget: usize, available: usize },

    #[error("incompatible model stage: {0}")]
    Stage(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("truncated blob {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("manifest and blob disagree in {path}: {reason}")]
    DimensionMismatch { path: PathBuf, reason: String },

    #[error("corrupt compressed payload: {0}")]
    Corrupt(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<KseError>,
    },
}

impl KseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KseError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_layer(self, layer: usize) -> Self {
        match self {
            e @ KseError::Layer { .. } => e,
            e => KseError::Layer {
                layer,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping layer annotations.
    pub fn root(&self) -> &KseError {
        match self {
            KseError::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}
