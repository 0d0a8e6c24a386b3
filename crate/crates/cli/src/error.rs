use thiserror::Error;

/// A failed command, classified by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("check failed\n{0}")]
    Check(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn message(&self) -> &str {
        match self {
            CliError::Check(m) | CliError::Config(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

/// Attaches an exit-code class to library errors. Divergence keeps its own
/// class wherever it surfaces.
pub(crate) trait Classify<T> {
    fn config(self) -> Result<T, CliError>;
    fn data(self) -> Result<T, CliError>;
}

fn classify(e: gacan::Error, fallback: fn(String) -> CliError) -> CliError {
    match e {
        gacan::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
        other => fallback(other.to_string()),
    }
}

impl<T> Classify<T> for Result<T, gacan::Error> {
    fn config(self) -> Result<T, CliError> {
        self.map_err(|e| classify(e, CliError::Config))
    }

    fn data(self) -> Result<T, CliError> {
        self.map_err(|e| classify(e, CliError::Data))
    }
}
