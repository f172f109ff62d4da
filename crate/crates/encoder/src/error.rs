use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Core(#[from] tqsim_core::CoreError),

    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} exceeds vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },

    #[error("unknown quantizer site `{0}`")]
    UnknownSite(String),

    #[error("unknown ablation group `{0}`")]
    UnknownGroup(String),

    #[error("site `{site}` has no finalized range; run calibration first")]
    UnfinalizedRange { site: String },

    #[error("site `{site}` cannot use {granularity} granularity: {reason}")]
    BadGranularity {
        site: String,
        granularity: String,
        reason: String,
    },

    #[error("training produced a non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },

    #[error("batch is malformed: {0}")]
    BadBatch(String),
}

pub type Result<T> = std::result::Result<T, EncoderError>;
