use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// An earlier position has no key/value entry at a layer that attention needs.
    #[error("cache gap: no key/value entry at layer {layer}, position {position}")]
    CacheGap { layer: usize, position: usize },

    #[error("key/value entry at layer {layer}, position {position} is already filled")]
    CacheOverwrite { layer: usize, position: usize },

    #[error("layer {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("logits contain non-finite values")]
    NonFiniteLogits,

    #[error("context overflow: {needed} positions requested, model supports {max}")]
    ContextOverflow { needed: usize, max: usize },

    #[error("prompt must contain at least one token")]
    EmptyPrompt,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("sampling verification needs the draft distribution of draft {index}")]
    MissingDraftDistribution { index: usize },

    #[error("hidden-state cache fault: {0}")]
    CacheFault(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
