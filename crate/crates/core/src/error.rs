use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// The CLI maps [`Error::Parse`] to exit status 2 and everything else to 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("protocol is empty: {0}")]
    EmptyProtocol(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}", located(source_name, *line, message))]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `source:line: message`, or `source: message` when there is no line.
fn located(source: &str, line: usize, message: &str) -> String {
    if line == 0 {
        format!("{source}: {message}")
    } else {
        format!("{source}:{line}: {message}")
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for malformed input (bad syntax, unknown keys).
    pub fn is_parse(&self) -> bool {
        matches!(self, Error::Parse { .. })
    }
}
