use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid weights: {0}")]
    Weights(String),

    #[error("malformed weight file header: {0}")]
    Header(String),

    #[error("weight file truncated: {0}")]
    Truncated(String),

    #[error("weight file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("position {position} overflows max_context {max_context}")]
    ContextOverflow { position: usize, max_context: usize },

    #[error("kv store at capacity ({capacity} tokens)")]
    Capacity { capacity: usize },

    #[error("cannot truncate to {to}: store holds {len} tokens")]
    Truncate { to: usize, len: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("indices must be strictly increasing")]
    UnsortedIndices,

    #[error("invalid attend spec: {0}")]
    AttendSpec(String),

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("softmax over all-masked logits")]
    AllMasked,

    #[error("empty row subset")]
    EmptyRows,

    #[error("k = {k} exceeds {len} candidates")]
    TopK { k: usize, len: usize },

    #[error("logit matrix has no row labelled {0}")]
    MissingRow(usize),

    #[error("overlap needs equal non-empty sets, got {left} and {right}")]
    OverlapSize { left: usize, right: usize },

    #[error("residual distribution undefined: p equals q")]
    IdenticalDistributions,

    #[error("page summaries missing for layer {0}")]
    MissingSummaries(usize),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
