use std::path::PathBuf;

/// Runner errors. Each variant maps to a distinct process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] dprobe_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub mod exit_code {
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const INPUT: u8 = 4;
    pub const FORMAT: u8 = 5;
    pub const IO: u8 = 6;
    pub const RUNTIME: u8 = 7;
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use dprobe_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Core(E::Config(_)) => exit_code::CONFIG,
            CliError::Input(_) | CliError::Core(E::Input(_)) => exit_code::INPUT,
            CliError::Core(E::Format { .. } | E::Json(_)) => exit_code::FORMAT,
            CliError::Io { .. } | CliError::Core(E::Io { .. }) => exit_code::IO,
            CliError::Core(E::Dimension { .. } | E::Parameter(_) | E::Contract(_) | E::Lookup(_)) => {
                exit_code::RUNTIME
            }
        }
    }
}
