use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] seedenc_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use seedenc_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => EXIT_USAGE,
            CliError::Core(E::Numerical { .. } | E::DegenerateVector | E::DegenerateBatch(_)) => EXIT_NUMERICAL,
            CliError::Core(E::Tensor(t)) if is_numerical(t) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

fn is_numerical(e: &seedenc_core::TensorError) -> bool {
    matches!(e, seedenc_core::TensorError::NonFinite(_))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
