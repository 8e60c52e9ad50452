use crate::checkpoint::CheckpointError;

/// Process exit codes.
pub mod code {
    pub const FAILURE: i32 = 1;
    /// Bad output path or unusable arguments.
    pub const INVALID_PATH: i32 = 2;
    /// An input directory holds no frames.
    pub const EMPTY_INPUT: i32 = 3;
    /// Dataset, checkpoint or config file missing or unreadable.
    pub const MISSING_INPUT: i32 = 4;
    pub const NON_FINITE_LOSS: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot write {0}")]
    InvalidPath(String),
    #[error("{0}")]
    EmptyInput(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("training diverged: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] genconvit_core::Error),
    #[error(transparent)]
    Tensor(#[from] genconvit_core::tensor::TensorError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use genconvit_core::Error as E;
        match self {
            CliError::Config(_) | CliError::InvalidPath(_) => code::INVALID_PATH,
            CliError::EmptyInput(_) => code::EMPTY_INPUT,
            CliError::MissingInput(_) => code::MISSING_INPUT,
            CliError::NonFinite(_) => code::NON_FINITE_LOSS,
            CliError::Checkpoint(CheckpointError::Io { .. }) => code::MISSING_INPUT,
            CliError::Checkpoint(_) => code::FAILURE,
            CliError::Core(E::EmptyDir(_) | E::NoFrames) => code::EMPTY_INPUT,
            CliError::Core(E::EmptyClass(_)) => code::MISSING_INPUT,
            CliError::Core(E::NonFiniteLoss(_)) => code::NON_FINITE_LOSS,
            CliError::Core(_) | CliError::Tensor(_) => code::FAILURE,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
