use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` needs {artifact}, which does not exist; run `{producer}` first")]
    MissingArtifact {
        stage: &'static str,
        artifact: PathBuf,
        producer: &'static str,
    },

    #[error("stale artifact: {0}")]
    Stale(String),

    #[error("access policy violation: {0}")]
    Policy(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::MissingArtifact { .. } => 4,
            CliError::Stale(_) => 5,
            CliError::Policy(_) => 6,
            CliError::Data(_) => 7,
            CliError::Numerical(_) => 8,
        }
    }
}

impl From<deepatrophy_core::Error> for CliError {
    fn from(e: deepatrophy_core::Error) -> Self {
        use deepatrophy_core::Error as E;
        match e {
            E::Io { path, source } => CliError::Io { path, source },
            E::Config(m) => CliError::Config(m),
            E::Numerical(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<deepatrophy_net::NetError> for CliError {
    fn from(e: deepatrophy_net::NetError) -> Self {
        use deepatrophy_net::NetError as E;
        match e {
            E::Io { path, source } => CliError::Io { path, source },
            E::Config(m) => CliError::Config(m),
            E::Numerical(m) => CliError::Numerical(m),
            E::Data(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<deepatrophy_stats::StatsError> for CliError {
    fn from(e: deepatrophy_stats::StatsError) -> Self {
        match e {
            deepatrophy_stats::StatsError::Data(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
