use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration does not match the schema or is out of range.
    #[error("configuration error: {0}")]
    Schema(String),

    #[error("numerical failure: {0}")]
    Numerical(homlab_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<homlab_core::Error> for CliError {
    fn from(e: homlab_core::Error) -> Self {
        match e {
            homlab_core::Error::InvalidConfig(msg) => CliError::Schema(msg),
            homlab_core::Error::Io(io) => CliError::Io(io),
            other => CliError::Numerical(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}
