use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("character {ch:?} at byte {offset} cannot be tokenized")]
    UnknownCharacter { ch: char, offset: usize },

    #[error("unknown token id {0}")]
    UnknownTokenId(usize),

    #[error("token id {token} is not representable in the `{view}` view")]
    NotInView { token: usize, view: String },

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("language `{0}` is already registered")]
    LanguageExists(String),

    #[error("language `{0}` already has its own embedding table")]
    TableExists(String),

    #[error("invalid language spec `{name}`: {reason}")]
    InvalidLanguage { name: String, reason: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("invalid target sequence: {0}")]
    InvalidTarget(String),

    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parameter `{name}` mismatch: {reason}")]
    MergeMismatch { name: String, reason: String },

    #[error("empty replay buffer for a replay strategy")]
    EmptyReplay,

    #[error("learnability gate failed for language `{language}`: WER {wer:.4} >= {threshold}")]
    GateFailed {
        language: String,
        wer: f64,
        threshold: f64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
