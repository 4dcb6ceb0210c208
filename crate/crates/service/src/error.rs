use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session is closed")]
    Closed,
    #[error("no suggestion is outstanding")]
    NoSuggestion,
    #[error("n_chars must be between 1 and {max}, got {got}")]
    AcceptBounds { got: usize, max: usize },
    #[error("rating must be between 0 and 9, got {0}")]
    RatingBounds(i64),
    #[error("nothing has been written in this session")]
    EmptyDraft,
    #[error("the sample pool is empty")]
    EmptyPool,
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mac_core::Error),
    #[error("event log {path}: {source}")]
    Store {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("event log line {line}: {source}")]
    Replay {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("completer task failed: {0}")]
    Task(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;
