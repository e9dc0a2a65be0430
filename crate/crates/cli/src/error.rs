use std::fmt;

use lfmark_core::Error as CoreError;
use serde_json::json;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Single-image detect ran fine but found no watermark.
pub const EXIT_NOT_WATERMARKED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Backend,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => EXIT_CONFIG,
            ErrorKind::Backend => EXIT_BACKEND,
            ErrorKind::Runtime => EXIT_RUNTIME,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Backend => "backend",
            ErrorKind::Runtime => "runtime",
        }
    }

    /// Classification of a library error when no call-site context applies.
    pub fn of(err: &CoreError) -> Self {
        match err {
            CoreError::Config(_) | CoreError::Parse { .. } | CoreError::Capacity { .. } => ErrorKind::Config,
            CoreError::Registry { .. } | CoreError::Capability { .. } | CoreError::Training(_) => ErrorKind::Backend,
            CoreError::Attack { source, .. } => ErrorKind::of(source),
            _ => ErrorKind::Runtime,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Backend, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// Error record tagged with the sweep grid point it came from.
    pub fn grid_point_record(&self, axis: &str, value: &str) -> String {
        json!({
            "error": {
                "kind": self.kind.as_str(),
                "code": self.exit_code(),
                "message": self.message,
                "axis": axis,
                "value": value,
            }
        })
        .to_string()
    }

    pub fn prefixed(mut self, context: &str) -> Self {
        self.message = format!("{context}: {}", self.message);
        self
    }

    /// One-line JSON error record for stderr.
    pub fn record(&self) -> String {
        json!({
            "error": {
                "kind": self.kind.as_str(),
                "code": self.exit_code(),
                "message": self.message,
            }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.as_str(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        Self { kind: ErrorKind::of(&err), message: err.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::runtime(err.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Reclassifies any failure as a config error, prefixed with `what`.
pub trait ConfigContext<T> {
    fn config_ctx(self, what: &str) -> CliResult<T>;
}

impl<T, E: fmt::Display> ConfigContext<T> for std::result::Result<T, E> {
    fn config_ctx(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError::config(format!("{what}: {e}")))
    }
}
