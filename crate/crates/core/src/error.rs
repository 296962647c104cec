use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot partition {layers} layers across {devices} devices")]
    Partition { layers: usize, devices: usize },

    #[error("feature cache error: {0}")]
    Cache(String),

    #[error("scheduler error: {0}")]
    Scheduler(String),

    #[error("unknown block id {0}")]
    Lookup(u64),

    #[error("all {0} blocks have already been appended")]
    AppendExhausted(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("malformed event log: {0}")]
    Log(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
