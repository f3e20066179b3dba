use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("schema: {0}")]
    Schema(String),

    #[error("numerical: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code buckets used by the command line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Schema(_) | Error::Serde(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Serde(_) => "serialization",
            Error::Schema(_) => "schema",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
        }
    }
}
