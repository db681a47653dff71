use std::fmt;

pub const OTHER: u8 = 1;
pub const USAGE: u8 = 2;
pub const NUMERIC: u8 = 3;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self { code: USAGE, error: anyhow::anyhow!("{msg}") }
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        Self { code: NUMERIC, error: anyhow::anyhow!("{msg}") }
    }

    pub fn other(error: impl Into<anyhow::Error>) -> Self {
        Self { code: OTHER, error: error.into() }
    }
}

impl From<adrgnn::Error> for CliError {
    fn from(e: adrgnn::Error) -> Self {
        let code = match &e {
            e if e.is_numeric() => NUMERIC,
            adrgnn::Error::Io { .. } => OTHER,
            _ => USAGE,
        };
        Self { code, error: e.into() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::other(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::other(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::other(e)
    }
}
