use std::fmt;

/// Errors surfaced by the CLI; each class maps to its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    UnknownKey(String),
    InvalidConfig(String),
    MissingCheckpoint(String),
    ConflictingOverrides(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::UnknownKey(_) => 3,
            CliError::MissingCheckpoint(_) => 4,
            CliError::ConflictingOverrides(_) => 5,
            CliError::InvalidConfig(_) => 6,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::UnknownKey(k) => write!(f, "unknown config key `{k}`"),
            CliError::InvalidConfig(m) => write!(f, "invalid config: {m}"),
            CliError::MissingCheckpoint(p) => write!(f, "checkpoint not found: {p}"),
            CliError::ConflictingOverrides(m) => write!(f, "conflicting overrides: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<maskclip_core::Error> for CliError {
    fn from(e: maskclip_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
