use std::path::PathBuf;

use crate::trace::EmbeddingKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("line {line}: {msg}")]
    Record { line: u64, msg: String },

    #[error("invalid hex token {0:?}")]
    Hex(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("key {key} is outside the schema")]
    OutOfSchema { key: EmbeddingKey },

    #[error("iteration {iteration}: cache miss on {key}")]
    CacheMiss { key: EmbeddingKey, iteration: u64 },

    #[error("cache capacity {capacity} exceeded inserting {key}")]
    CacheOverflow { key: EmbeddingKey, capacity: usize },

    #[error("{key} is already cached")]
    DuplicateInsert { key: EmbeddingKey },

    #[error("{key} is not cached")]
    NotCached { key: EmbeddingKey },

    #[error("ttl {ttl} for {key} is not after completed iteration {completed}")]
    StaleTtl { key: EmbeddingKey, ttl: u64, completed: u64 },

    #[error("iteration {iteration}: {unique} unique keys exceed cache capacity {capacity}")]
    CapacityBelowBatch { iteration: u64, unique: usize, capacity: usize },

    #[error("batch iterations must be consecutive: expected {expected}, got {got}")]
    NonConsecutive { expected: u64, got: u64 },

    #[error("value for {key} has length {got}, expected {expected}")]
    ValueLength { key: EmbeddingKey, got: usize, expected: usize },

    #[error("consistency violation: {0}")]
    Consistency(String),

    #[error("runs are not comparable: {0}")]
    Incomparable(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed message: {0}")]
    Protocol(String),

    #[error("trace file {path}: {msg}")]
    TraceFormat { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    /// I/O failures surface as [`Error::Io`] whichever writer produced them.
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                return Error::Io(io);
            }
            unreachable!("io csv error without io kind");
        }
        Error::Csv(e)
    }
}
