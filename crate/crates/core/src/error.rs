use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid subject profile: {0}")]
    InvalidProfile(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("container version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("container truncated while reading {0}")]
    Truncated(&'static str),

    #[error("container checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("container has wrong magic bytes")]
    BadMagic,

    #[error("malformed data: {0}")]
    Format(String),

    #[error("model has not been trained")]
    Untrained,

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("no sleep detected")]
    NoSleep,

    #[error("{stage} failed for subject {subject}: {source}")]
    Stage {
        stage: String,
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
