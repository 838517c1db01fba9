use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error("degenerate instance: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Optimization(_) => 3,
            CliError::Degenerate(_) => 4,
            CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }
}

/// Wraps any displayable error as a runtime failure.
pub(crate) fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}
