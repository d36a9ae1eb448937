use std::path::PathBuf;

use cliquenet_core::Error as CoreError;

/// Failures of the std layer. Each variant maps to its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot access {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("malformed config: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Core(CoreError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. } => CliError::Config(e.to_string()),
            CoreError::Incompatible { .. } => CliError::Incompatible(e.to_string()),
            CoreError::NonFiniteLoss { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        CliError::Format { what, detail: detail.into() }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Format { .. } => "format",
            CliError::Incompatible(_) => "incompatible",
            CliError::Diverged(_) => "diverged",
            CliError::Core(_) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Config(_) => 4,
            CliError::Format { .. } => 5,
            CliError::Incompatible(_) => 6,
            CliError::Diverged(_) => 7,
        }
    }

    /// One line: `error kind=<tag> exit=<code> msg=<JSON string>`.
    pub fn machine_line(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).unwrap_or_else(|_| "\"\"".into());
        format!("error kind={} exit={} msg={}", self.kind(), self.exit_code(), msg)
    }
}
