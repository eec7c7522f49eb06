use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty attention row at position {0}")]
    EmptyAttentionRow(usize),
    #[error("target index {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("token id {0} unknown to the vocabulary")]
    UnknownToken(usize),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite loss encountered during finite-difference perturbation")]
    NonFiniteLoss,
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds maximum input length {max}")]
    ExceedsMaxLength { len: usize, max: usize },
    #[error("layout/framework mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid interval boundary: {0}")]
    InvalidBoundary(String),
    #[error("pretraining lineage mismatch: framework {framework} expects {expected} pretraining, checkpoint is tagged {found} (pass force_lineage to override)")]
    LineageMismatch {
        framework: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint version {0} is not supported (expected {1})")]
    CheckpointVersion(u32, u32),
    #[error("checkpoint checksum failure: file is corrupted")]
    ChecksumFailure,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("constraint exhaustion: every candidate token is blocked")]
    ConstraintExhaustion,
    #[error("decode cache inconsistent with hypothesis prefix: {0}")]
    CacheMismatch(String),
    #[error("invalid decode parameters: {0}")]
    InvalidDecodeParams(String),
    #[error("metric input error: {0}")]
    MetricInput(String),
    #[error("misaligned corpora: {hyps} hypotheses vs {refs} references")]
    MisalignedCorpora { hyps: usize, refs: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
