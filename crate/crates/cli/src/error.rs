//! CLI error type with exit-code categories: 2 for configuration and usage
//! problems, 3 for I/O and file-format failures, 4 for numerical failures.

use bdgp_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Io { .. }
                | CoreError::MalformedHeader(_)
                | CoreError::PayloadSize { .. }
                | CoreError::NonFiniteValue { .. }
                | CoreError::Format(_) => 3,
                CoreError::Numeric(_) => 4,
                CoreError::GeometryMismatch(_)
                | CoreError::InvalidArgument(_)
                | CoreError::NoValidData(_) => 2,
            },
        }
    }
}
