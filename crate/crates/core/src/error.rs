use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report.
///
/// Each variant maps onto a stable, machine-parsable category string
/// (see [`Error::category`]) and a process exit code used by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("key `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("{what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0}")]
    InvalidTopology(String),

    #[error("{0}")]
    ConstructionFailure(String),

    #[error("{what} after {iterations} iterations")]
    NumericalFailure { what: String, iterations: usize },

    #[error("agent {agent} diverged in round {round}: {detail}")]
    Divergence {
        agent: usize,
        round: usize,
        detail: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: usize, found: usize) -> Self {
        Error::Shape {
            what,
            expected,
            found,
        }
    }

    /// Short kebab-case category used as the prefix of CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidConfig { .. } => "invalid-config",
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape { .. } => "shape-error",
            Error::InvalidTopology(_) => "invalid-topology",
            Error::ConstructionFailure(_) => "construction-failure",
            Error::NumericalFailure { .. } => "numerical-failure",
            Error::Divergence { .. } => "divergence-error",
            Error::Io { .. } => "io-error",
            Error::Parse { .. } => "parse-error",
        }
    }

    /// Process exit code: 2 invalid-config, 3 io-error, 4 divergence-error,
    /// 5 construction-failure. Other categories fold into the closest of
    /// those four.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig { .. } | Error::InvalidInput(_) | Error::Shape { .. } => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::Divergence { .. } | Error::NumericalFailure { .. } => 4,
            Error::ConstructionFailure(_) | Error::InvalidTopology(_) => 5,
        }
    }
}
