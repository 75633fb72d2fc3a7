use std::io;
use std::path::PathBuf;

/// Failure of a command, split by the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, configs or input files.
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// A violated runtime invariant or a non-finite value.
    #[error("{0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] lstcl_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for usage, configuration and input problems, 3 for numeric and invariant failures.
    pub fn exit_code(&self) -> i32 {
        use lstcl_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Invariant(_) => 3,
            CliError::Core(e) => match e {
                E::Numeric(_) | E::Attention(_) | E::Index(_) => 3,
                E::Config(_) | E::Shape(_) | E::Sampling { .. } | E::ParamMap(_) | E::Protocol(_) => 2,
            },
        }
    }
}

/// Attaches a path to IO errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
