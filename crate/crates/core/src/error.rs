use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic {found:?} at byte offset {offset} (expected \"ADZT\")")]
    BadMagic { found: [u8; 4], offset: u64 },

    #[error("unsupported format version {version} at byte offset {offset}")]
    UnsupportedVersion { version: u32, offset: u64 },

    #[error("shape mismatch at byte offset {offset}: {reason}")]
    ShapeMismatch { offset: u64, reason: String },

    #[error("non-finite value {value} at index {index:?} (byte offset {offset})")]
    NonFiniteValue {
        index: [usize; 4],
        offset: u64,
        value: f32,
    },

    #[error("negative value {value} at index {index:?} (byte offset {offset})")]
    NegativeValue {
        index: [usize; 4],
        offset: u64,
        value: f32,
    },

    #[error("truncated input: needed {needed} bytes at byte offset {offset}")]
    Truncated { offset: u64, needed: u64 },

    #[error("slice [{row}, {col}] of layer {layer_id} sums to {sum}, beyond the accepted drift")]
    Unnormalized {
        layer_id: usize,
        row: usize,
        col: usize,
        sum: f64,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} is empty")]
    Empty { what: &'static str },

    #[error("malformed raster: {0}")]
    Raster(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through `File` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::File { source, .. } => source.root(),
            other => other,
        }
    }

    /// Outermost file path attached to the error, if any.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::File { path, .. } | Error::Manifest { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Stable machine-readable name of the root cause.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFiniteValue { .. } => "non_finite_value",
            Error::NegativeValue { .. } => "negative_value",
            Error::Truncated { .. } => "truncated",
            Error::Unnormalized { .. } => "unnormalized",
            Error::Manifest { .. } => "manifest",
            Error::File { .. } => "file",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::Empty { .. } => "empty",
            Error::Raster(_) => "raster",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Png(_) => "png",
        }
    }
}
