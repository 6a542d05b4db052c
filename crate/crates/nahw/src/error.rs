use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Training(_) => 4,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(path: &Path, msg: impl std::fmt::Display) -> CliError {
        CliError::Data(format!("{}: {msg}", path.display()))
    }
}

impl From<nahw_core::Error> for CliError {
    fn from(e: nahw_core::Error) -> Self {
        use nahw_core::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::Budget(_) => CliError::Training(format!("training aborted: {e}")),
            E::Training { .. } => CliError::Training(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
