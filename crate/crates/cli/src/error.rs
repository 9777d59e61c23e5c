use std::fmt;

/// Process outcome mapped to an exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    /// Every query fell back because the ranker could not be reached.
    BackendUnreachable(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::BackendUnreachable(_) => 3,
        }
    }

    pub fn data(e: impl fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn usage(e: impl fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::BackendUnreachable(n) => {
                write!(f, "ranker backend unreachable: all {n} queries fell back to retrieval order")
            }
        }
    }
}

/// Attaches a path or other context to a data error.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> Result<T, CliError> {
        self.map_err(|e| CliError::Data(format!("{what}: {e}")))
    }
}
