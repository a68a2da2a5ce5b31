use std::path::PathBuf;

/// Error taxonomy shared by the whole workspace. The CLI maps each variant
/// class to a stable process exit code, so keep the classification coarse:
/// bad inputs, missing artifacts, numeric breakdowns.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid input: configs, shapes, thresholds, malformed files.
    #[error("{0}")]
    Input(String),

    /// A required on-disk artifact (checkpoint, triplet file, report) is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// Numeric failure: NaN/Inf, zero-norm embeddings, non-deterministic forward.
    #[error("{0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn missing(msg: impl Into<String>) -> Self {
        Error::MissingArtifact(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 input, 3 missing artifact, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Io { .. } => 2,
            Error::MissingArtifact(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    /// Prefixes the message with a context label (e.g. the pipeline stage),
    /// preserving the variant so exit codes survive.
    pub fn context(self, label: &str) -> Self {
        match self {
            Error::Input(m) => Error::Input(format!("{label}: {m}")),
            Error::MissingArtifact(m) => Error::MissingArtifact(format!("{label}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{label}: {m}")),
            io @ Error::Io { .. } => io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
