use std::fmt;
use std::io;
use std::path::PathBuf;

/// Errors of the file, network and harness layer. Errors of the estimators
/// themselves arrive wrapped in [`Error::Core`].
#[derive(Debug)]
pub enum Error {
    Io { path: PathBuf, source: io::Error },
    /// A dataset line that is not a JSON object. Lines count from 1.
    MalformedLine { line: usize, message: String },
    MissingField { line: usize, field: &'static str },
    Json(serde_json::Error),
    Csv(String),
    InvalidConfig(String),
    /// The ablation axis does not apply to a configured attack.
    InapplicableAxis { axis: String, attack: String },
    Core(propinfer_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::MalformedLine { line, message } => write!(f, "line {line}: malformed record: {message}"),
            Error::MissingField { line, field } => write!(f, "line {line}: missing field `{field}`"),
            Error::Json(e) => write!(f, "json: {e}"),
            Error::Csv(msg) => write!(f, "csv: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InapplicableAxis { axis, attack } => {
                write!(f, "ablation axis `{axis}` does not apply to attack `{attack}`")
            }
            Error::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Json(e) => Some(e),
            Error::Core(e) => Some(e),
            _ => None,
        }
    }
}

impl From<propinfer_core::Error> for Error {
    fn from(e: propinfer_core::Error) -> Error {
        Error::Core(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Error {
        Error::Json(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Error {
        Error::Csv(e.to_string())
    }
}
