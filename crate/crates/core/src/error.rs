use std::path::PathBuf;

/// Error categories shared by every module. Each variant maps onto one
/// process exit code in the command-line front end.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid hyperparameters, shapes or layer configuration.
    #[error("configuration: {0}")]
    Config(String),
    /// An API was called out of contract (missing inputs, freed graph, ...).
    #[error("usage: {0}")]
    Usage(String),
    /// Malformed or missing input files.
    #[error("ingestion: {0}")]
    Ingestion(String),
    /// Checkpoint or cache content that does not match what was expected.
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn ingestion(msg: impl Into<String>) -> Self {
        Error::Ingestion(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Usage(_) => "usage",
            Error::Ingestion(_) => "ingestion",
            Error::Integrity(_) => "integrity",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 2 usage, 3 ingestion, 4 integrity, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Ingestion(_) => 3,
            Error::Integrity(_) => 4,
            Error::Io { .. } => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
