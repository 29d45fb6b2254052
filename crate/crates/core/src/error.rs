use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CsfError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("no decodable images found in {0}")]
    EmptyDirectory(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask generation failed: {0}")]
    MaskGeneration(String),

    #[error("amodal backend `{backend}` unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },

    #[error("amodal backend `{backend}` produced no candidates")]
    NoCandidates { backend: String },

    #[error("candidate is unscorable: validity does not overlap the visible region")]
    EmptyOverlap,

    #[error("missing pretrained asset `{name}` (looked for {path})")]
    MissingAsset { name: String, path: PathBuf },

    #[error("malformed asset `{name}`: {reason}")]
    BadAsset { name: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("inpainter adapter `{0}` is not registered")]
    UnknownAdapter(String),

    #[error("inpainter adapter `{id}` failed: {reason}")]
    AdapterFailed { id: String, reason: String },

    #[error("report rows are not comparable: {0}")]
    Incomparable(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = CsfError> = std::result::Result<T, E>;

impl CsfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsfError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for CsfError {
    fn from(e: serde_json::Error) -> Self {
        CsfError::Serde(e.to_string())
    }
}
