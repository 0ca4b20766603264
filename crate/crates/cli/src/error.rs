use std::fmt;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sivit::Error> for CliError {
    fn from(e: sivit::Error) -> Self {
        use sivit::Error::*;
        let msg = e.to_string();
        match e {
            Numerical(_) => CliError::Numerical(msg),
            Io { .. } | Format { .. } => CliError::Io(msg),
            Shape(_) | Contract(_) | Config(_) | Data(_) => CliError::Usage(msg),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("i/o error on {}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, CliError>;
