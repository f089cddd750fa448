//! On-disk formats: the binary tensor container and the dataset manifest.

mod manifest;
mod tensor_file;

use std::path::{Path, PathBuf};

pub use manifest::{
    load_manifest, parse_manifest, validate_manifest, Manifest, ManifestEntry, Split, TextEmbeddingPaths,
    ValidationIssue, ValidationReport, SCHEMA_VERSION,
};
pub use tensor_file::{
    decode_tensor, encode_tensor, read_tensor, read_tensor_as, write_tensor, AnyTensor, MAGIC, VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {inner}", path.display())]
    At {
        path: PathBuf,
        #[source]
        inner: Box<StorageError>,
    },
    #[error("truncated tensor file: need {expected} bytes, have {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("tensor file size mismatch: expected {expected} bytes, have {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("bad magic {0:?} (expected \"DVLT\")")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("duplicate video_id {0:?}")]
    DuplicateVideoId(String),
    #[error("manifest validation failed: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ValidationIssue>),
}

impl StorageError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StorageError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        StorageError::At {
            path: path.to_path_buf(),
            inner: Box::new(self),
        }
    }

    /// The underlying error with any path context removed.
    pub fn root(&self) -> &StorageError {
        match self {
            StorageError::At { inner, .. } => inner.root(),
            other => other,
        }
    }
}
