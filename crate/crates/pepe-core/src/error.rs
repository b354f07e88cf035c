//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PepeError>;

#[derive(Debug, Error)]
pub enum PepeError {
    #[error("corpus file {path}, line {line}: {msg}")]
    CorpusParse { path: String, line: usize, msg: String },

    #[error("corpus file {path}, line {line}: unknown token {token:?}")]
    UnknownToken { path: String, line: usize, token: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("vocabulary too small for the template grammar: missing {token:?}")]
    VocabMissingToken { token: String },

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("TF-IDF user similarity needs at least 2 users, corpus has {0}")]
    SingleUserCorpus(usize),

    #[error("user {user_id:?} has {n} triplets; splitting needs at least 3")]
    TooFewSamplesToSplit { user_id: String, n: usize },

    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),

    #[error("user {0:?} is not registered in the model")]
    UnregisteredUser(String),

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("encoder snapshot has not completed task-adaptive pretraining")]
    UntrainedSnapshot,

    #[error("cluster label {label} out of range for k={k}")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("GMM needs at least k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },

    #[error("non-finite loss at step {step}: ape={ape}, disc={disc}")]
    NonFiniteLoss { step: usize, ape: f64, disc: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("variant {variant} does not accept {feature}")]
    VariantMismatch { variant: String, feature: String },

    #[error("missing prerequisite stage {stage:?}: {msg}")]
    MissingStage { stage: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
