use std::path::PathBuf;

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("loss must be a scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("language `{0}` has no transcripts")]
    EmptyTranscripts(String),
    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },
    #[error("feature file {path}: {kind}")]
    Feature { path: PathBuf, kind: FeatureError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("incompatible topology: {0}")]
    Topology(String),
    #[error("missing artifact {path}; run stage `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

/// Failure kinds for the binary feature format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FeatureError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("trailing bytes after payload")]
    TrailingBytes,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse class used for process exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnknownLanguage(_) | Error::Topology(_) => ErrorClass::Config,
            Error::NonFinite(_) | Error::Diverged { .. } => ErrorClass::Numerical,
            Error::ShapeMismatch { .. } | Error::NonScalarLoss { .. } | Error::TokenOutOfRange { .. } => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
