use thiserror::Error;

/// Errors raised anywhere in the simulator.
///
/// The variants are grouped into the categories the command-line front end
/// turns into exit codes, see [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("mask validation failed: {message} (offending units: {units:?})")]
    Validation { message: String, units: Vec<String> },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    Other,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numerical => 4,
            ErrorCategory::Other => 1,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::ConfigParse(_)
            | Error::Topology(_)
            | Error::Validation { .. }
            | Error::Usage(_) => ErrorCategory::Config,
            Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Input(_) => ErrorCategory::Data,
            Error::Numerical { .. } | Error::Protocol(_) => ErrorCategory::Numerical,
            Error::Shape { .. } => ErrorCategory::Other,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
