use std::fmt;

use vtp_core::Error;

/// A command failure, tagged with its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass.
    Check(String),
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(m) | Failure::Usage(m) | Failure::Validation(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Shape { .. } | Error::InvalidArgument(_) | Error::Config(_) | Error::Format { .. } => {
                Failure::Validation(msg)
            }
            Error::NonFinite { .. } | Error::Io { .. } => Failure::Runtime(msg),
        }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(format!("csv: {e}"))
    }
}

/// Input files named on the command line must exist; a missing one is a
/// usage error rather than an I/O failure.
pub fn require_file(path: &std::path::Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}
