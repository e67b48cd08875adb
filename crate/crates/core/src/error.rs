use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("layer {layer}: shape chain broken, expected {expected} but manifest declares {declared}")]
    ShapeChain {
        layer: usize,
        expected: String,
        declared: String,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("weight blob {path} has {actual} bytes, expected {expected}")]
    BlobSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("weight blob {path} checksum mismatch: manifest {expected}, file {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("unknown preset '{0}' (expected netsvf, nethvf, gtsdb or tiny)")]
    UnknownPreset(String),

    #[error("unsupported image: {0}")]
    Image(String),

    #[error("model has no convolution stages")]
    NoConvStages,

    #[error("output index {index} out of range for output of length {len}")]
    OutputIndex { index: usize, len: usize },

    #[error("flow oracle: {0}")]
    Oracle(String),

    #[error("degenerate flow: live node {0} has zero input flow")]
    DegenerateFlow(String),

    #[error("path enumeration cap exceeded: {paths} paths > cap {cap}")]
    EnumerationCap { paths: u128, cap: u128 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }
}
