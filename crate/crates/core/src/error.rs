use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Each variant maps onto a CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch at {location}: expected {expected}, got {actual}")]
    Shape {
        location: String,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data/format error: {0}")]
    Data(String),

    #[error("budget unsatisfiable: {0}")]
    Budget(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(location: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            location: location.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 budget, 4 data, 5 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::Invalid(_) => 2,
            Error::Budget(_) => 3,
            Error::Data(_) | Error::Io { .. } => 4,
            Error::Numerical(_) => 5,
        }
    }
}
