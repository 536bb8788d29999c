use std::fmt;
use std::path::Path;

/// Command failure, classified for the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config values or parameter combinations (exit 2).
    Usage(String),
    /// Missing, unreadable or inconsistent input data (exit 3).
    Data(String),
    /// Anything that indicates a bug or an environment fault (exit 4).
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn map_message(self, f: impl FnOnce(String) -> String) -> Failure {
        match self {
            Failure::Usage(m) => Failure::Usage(f(m)),
            Failure::Data(m) => Failure::Data(f(m)),
            Failure::Internal(m) => Failure::Internal(f(m)),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl From<broadsound::Error> for Failure {
    fn from(e: broadsound::Error) -> Self {
        use broadsound::Error as E;
        match e {
            E::InvalidParameter(_) | E::SampleTooLarge { .. } => Failure::Usage(e.to_string()),
            E::Json(_) => Failure::Internal(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<broadsound_review::ServiceError> for Failure {
    fn from(e: broadsound_review::ServiceError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

pub trait Context<T> {
    /// Prefixes the error message with the file it concerns.
    fn at(self, path: &Path) -> Result<T, Failure>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn at(self, path: &Path) -> Result<T, Failure> {
        self.map_err(|e| e.into().map_message(|m| format!("{}: {m}", path.display())))
    }
}
