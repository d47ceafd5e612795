use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8")]
    NotUtf8 { path: PathBuf },
    #[error("malformed record in {path} line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no documents")]
    NoDocuments,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("target size {requested} is infeasible: {reason}")]
    InfeasibleTargetSize { requested: usize, reason: String },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("teacher probabilities in row {row} sum to {sum}, expected 1")]
    TeacherNotNormalized { row: usize, sum: f64 },
    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_pos {max_pos}")]
    SequenceTooLong { len: usize, max_pos: usize },
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("invalid annotation: {0}")]
    Annotation(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
