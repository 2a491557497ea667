use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nxtpost_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; batch users {users:?}")]
    NonFinite { step: usize, users: Vec<u64> },
    #[error("not enough data: {0}")]
    NotEnoughData(String),
    #[error("unknown user {0}: no embedding, use the cold-start path")]
    ColdUser(u64),
    #[error("post {0} is integrity-violating and was rejected")]
    IntegrityRejected(u64),
    #[error("replay diverged: {0}")]
    ReplayMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}
