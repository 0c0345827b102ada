use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("missing artifact {}; run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: String },
    #[error(transparent)]
    Runtime(logsem::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::MissingArtifact { .. } => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<logsem::Error> for CliError {
    fn from(e: logsem::Error) -> Self {
        match e {
            logsem::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other),
        }
    }
}
