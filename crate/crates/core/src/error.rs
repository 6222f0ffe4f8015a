use alloc::string::String;

/// Errors produced by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("attribute lexicon is missing required attribute `{0}`")]
    MissingAttribute(String),
    #[error("instruction `{0}` is not registered")]
    UnregisteredInstruction(String),
    #[error("instruction index {index} out of range (registry has {len})")]
    InstructionIndex { index: usize, len: usize },
    #[error("duplicate instruction tag `{0}`")]
    DuplicateInstruction(String),
    #[error("sequence overflows the context window in the {segment} segment ({len} > {window})")]
    ContextOverflow { segment: &'static str, len: usize, window: usize },
    #[error("empty loss mask")]
    EmptyMask,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("encoder version mismatch: store `{store}`, model `{model}`")]
    EncoderVersion { store: String, model: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
