use std::fmt;
use std::path::Path;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Missing(String),
    Config(String),
    Format(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Config(_) => 4,
            CliError::Format(_) => 5,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(format!("{} not found", path.display()))
        } else {
            CliError::Other(format!("{}: {e}", path.display()))
        }
    }

    /// Attach the file a library error came from.
    pub fn at(path: &Path, e: poseforge::Error) -> Self {
        use poseforge::Error as E;
        match e {
            E::Io(io) => Self::io(path, io),
            E::Format { .. } | E::Checkpoint(_) => CliError::Format(format!("{}: {e}", path.display())),
            E::Dimension(_) | E::MissingClass(_) => CliError::Config(format!("{}: {e}", path.display())),
            other => CliError::Other(format!("{}: {other}", path.display())),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage error", m),
            CliError::Missing(m) => ("missing file", m),
            CliError::Config(m) => ("config mismatch", m),
            CliError::Format(m) => ("format error", m),
            CliError::Other(m) => ("error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<poseforge::Error> for CliError {
    fn from(e: poseforge::Error) -> Self {
        match e {
            poseforge::Error::Dimension(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
