use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Checkpoint,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("length {got} ≠ {expected}")]
    Length { got: usize, expected: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("{what} = {value} out of range [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("divergence: non-finite gradient in {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("cannot tile {n}-bit operands with {m}-bit multipliers (need n = m·2^k)")]
    Tiling { n: u32, m: u32 },

    #[error("quantization contract: {0}")]
    QuantContract(String),

    #[error("unsupported similarity kind for quantization: layer {layer} is {kind}")]
    UnsupportedKind { layer: usize, kind: String },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("layer {index}: {source}")]
    AtLayer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("batch {index}: {source}")]
    AtBatch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("grid cell ({a}, {b}): {source}")]
    AtCell {
        a: f32,
        b: f32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_layer(self, index: usize) -> Self {
        Error::AtLayer {
            index,
            source: Box::new(self),
        }
    }

    pub fn at_batch(self, index: usize) -> Self {
        Error::AtBatch {
            index,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::AtLayer { source, .. }
            | Error::AtBatch { source, .. }
            | Error::AtCell { source, .. } => source.class(),
            Error::Idx(_) | Error::Io { .. } | Error::Label { .. } => ErrorClass::Data,
            Error::Checkpoint(_) => ErrorClass::Checkpoint,
            Error::NonFinite(_) | Error::Divergence(_) | Error::Degenerate(_) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Config,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad IDX magic at offset {offset}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        offset: usize,
        expected: u32,
        found: u32,
    },
    #[error("truncated IDX file: need {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint at offset {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint incompatible with model; differing tensors: {}", .0.join(", "))]
    Incompatible(Vec<String>),
}

impl CheckpointError {
    /// Stable numeric code per failure mode.
    pub fn code(&self) -> u8 {
        match self {
            CheckpointError::BadMagic(_) => 1,
            CheckpointError::Version { .. } => 2,
            CheckpointError::Truncated(_) => 3,
            CheckpointError::Malformed(_) => 4,
            CheckpointError::Incompatible(_) => 5,
        }
    }
}
