use thiserror::Error;

/// CLI failures, classified for the exit-code contract: input-format
/// problems exit with 2, configuration problems with 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

impl From<tqsim_core::CoreError> for CliError {
    fn from(e: tqsim_core::CoreError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<tqsim_encoder::EncoderError> for CliError {
    fn from(e: tqsim_encoder::EncoderError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
