use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("no corpora to build a vocabulary from")]
    EmptyCorpora,
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("parallel sides differ in length: {left} vs {right} lines")]
    SideLengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("empty batch")]
    EmptyBatch,
    #[error("every candidate token is banned")]
    AllTokensBanned,
    #[error("required data stream missing: {0}")]
    MissingStream(&'static str),
    #[error("unknown script class {0:?}")]
    UnknownScriptClass(String),
    #[error("need at least {need} samples per side, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("ablation size {size} exceeds the {available} available sentences")]
    SizeExceedsCorpus { size: usize, available: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
