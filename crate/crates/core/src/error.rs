use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape/spec error: {0}")]
    Spec(String),
    #[error("unsupported latent spec: {0}")]
    Unsupported(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error("domain `{0}` is already registered")]
    Conflict(String),
    #[error("domain `{0}` is not registered")]
    NotFound(String),
    #[error("corrupted artifact {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },
    #[error("prior fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("refusing to overwrite {0}")]
    Overwrite(PathBuf),
    #[error("registry is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error at {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },
    #[error("translation chain step {index}: {source}")]
    Chain {
        index: usize,
        #[source]
        source: Box<AnchorError>,
    },
}

impl AnchorError {
    /// The innermost error of a chain failure.
    pub fn root(&self) -> &AnchorError {
        match self {
            AnchorError::Chain { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = AnchorError> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| AnchorError::Io {
            path: path.into(),
            source,
        })
    }
}
