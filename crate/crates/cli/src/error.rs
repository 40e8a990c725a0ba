use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("output directory {} is locked by another run (remove {} if stale)", .0.display(), .0.join(crate::rundir::LOCK_FILE).display())]
    Locked(PathBuf),
    #[error(transparent)]
    Core(#[from] vcaptcha_core::Error),
    #[error(transparent)]
    Nn(#[from] vcaptcha_nn::NnError),
    #[error(transparent)]
    Pipeline(#[from] vcaptcha_pipeline::PipelineError),
    #[error(transparent)]
    Server(#[from] vcaptcha_server::ApiError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::InvalidInput(_) => "invalid_input",
            CliError::Locked(_) => "locked",
            CliError::Core(vcaptcha_core::Error::Io { .. }) | CliError::Io { .. } => "io",
            CliError::Core(_) | CliError::Nn(_) | CliError::Pipeline(_) | CliError::Server(_) => "invalid_input",
            CliError::Json(_) | CliError::Csv(_) => "format",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    /// The single-line JSON record printed on failure.
    pub fn record(&self, command: &str) -> serde_json::Value {
        json!({
            "status": "error",
            "command": command,
            "kind": self.kind(),
            "message": self.to_string(),
        })
    }
}
