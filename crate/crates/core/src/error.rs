use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every stage of the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("document {doc_id} references unknown original {parent_id}")]
    MissingParent { doc_id: String, parent_id: String },

    #[error("duplicate identifier {0}")]
    DuplicateId(String),

    #[error("{file}:{line}: malformed record: {reason}")]
    MalformedRecord { file: String, line: usize, reason: String },

    #[error("corpus has no original documents")]
    EmptyCorpus,

    #[error("text produced no tokens")]
    EmptyText,

    #[error("incompatible configurations: {0}")]
    ConfigMismatch(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unknown feature kind code {0}")]
    UnknownKind(u8),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("vector for {item_id} is not unit-norm (norm {norm})")]
    NotNormalized { item_id: String, norm: f64 },

    #[error("missing items: {}", .0.join(", "))]
    MissingItem(Vec<String>),

    #[error("zero vector for {0}")]
    ZeroVector(String),

    #[error("InfoNCE needs at least one negative")]
    NoNegatives,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("every position is masked")]
    AllMasked,

    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("candidate sets differ for query {0}")]
    CandidateMismatch(String),

    #[error("no validation queries")]
    EmptyValidation,

    #[error("query {0} has no valid positives")]
    EmptyPositives(String),

    #[error("method {method} has no ranking for query {query_id}")]
    MissingRanking { method: String, query_id: String },

    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),

    #[error("cell {0} has fewer than two seeds")]
    SingleSeed(String),

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn malformed(file: impl Into<String>, line: usize, reason: impl ToString) -> Self {
        Self::MalformedRecord {
            file: file.into(),
            line,
            reason: reason.to_string(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Self::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
