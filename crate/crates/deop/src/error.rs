use std::path::PathBuf;

/// Errors of the IO and command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] deop_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: byte {offset}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{}: checkpoint fingerprint {found:016x} does not match the configuration ({expected:016x})", path.display())]
    Fingerprint {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

impl Error {
    /// Stable kebab-case tag used in the one-line CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(deop_core::Error::Diverged { .. }) => "diverged",
            Error::Core(deop_core::Error::Config(_)) | Error::Config(_) => "config",
            Error::Core(deop_core::Error::Protocol(_)) => "protocol",
            Error::Core(_) => "core",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Fingerprint { .. } => "fingerprint",
            Error::MissingCheckpoint(_) => "missing-checkpoint",
            Error::Failed(_) => "failed",
        }
    }
}
