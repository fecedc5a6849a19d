use std::process::ExitCode;

use flowguide::Error;

/// Command failures, one per exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, bad input or an unusable file: exit 1.
    Config(String),
    /// A numerical blow-up: exit 2.
    Divergence(String),
    /// A study could not assert its claim: exit 3.
    Inconclusive(String),
    /// A check or study ran and failed: exit 4.
    Failed(String),
}

impl CliError {
    pub fn config(field: &str, message: impl std::fmt::Display) -> Self {
        CliError::Config(format!("invalid config field `{field}`: {message}"))
    }

    pub fn with_context(self, context: &str) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
            CliError::Divergence(m) => CliError::Divergence(format!("{context}: {m}")),
            CliError::Inconclusive(m) => CliError::Inconclusive(format!("{context}: {m}")),
            CliError::Failed(m) => CliError::Failed(format!("{context}: {m}")),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 1,
            CliError::Divergence(_) => 2,
            CliError::Inconclusive(_) => 3,
            CliError::Failed(_) => 4,
        })
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Divergence(m) => write!(f, "numerical divergence: {m}"),
            CliError::Inconclusive(m) => write!(f, "inconclusive: {m}"),
            CliError::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_divergence() => CliError::Divergence(msg),
            Error::Accuracy { .. } | Error::NonConvergence { .. } | Error::TrainingThreshold { .. } => CliError::Failed(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {e}"))
    }
}
