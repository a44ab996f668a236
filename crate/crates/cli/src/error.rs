use resdiff_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    /// Process exit status: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) => match e {
                Error::Numeric { .. } => EXIT_NUMERIC,
                Error::Io { .. } | Error::Format { .. } | Error::Precondition(_) | Error::Dimension(_) => EXIT_DATA,
                Error::Config(_) | Error::Domain(_) | Error::Range(_) | Error::State(_) | Error::Structure(_) => {
                    EXIT_CONFIG
                }
            },
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Wraps an I/O failure on `path` as a data error.
pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}
