use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad, missing or unknown configuration; also inputs that do not fit
    /// together (e.g. a checkpoint trained on other image sizes).
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(tte_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Core(tte_core::Error::NonFinite(_)) => 3,
            CliError::Core(tte_core::Error::Io(_)) | CliError::Io { .. } => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl From<tte_core::Error> for CliError {
    fn from(e: tte_core::Error) -> Self {
        match e {
            tte_core::Error::NonFinite(msg) => CliError::Numerical(msg),
            other => CliError::Core(other),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
