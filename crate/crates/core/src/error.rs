use thiserror::Error;

/// Errors raised by every module of the crate.
///
/// Each variant carries the module that raised it so command-line front ends
/// can report a module-qualified code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{module}: invalid argument: {message}")]
    InvalidArgument { module: &'static str, message: String },

    #[error("{module}: shape mismatch: {message}")]
    Shape { module: &'static str, message: String },

    #[error("{module}: non-finite value: {message}")]
    NonFinite { module: &'static str, message: String },

    #[error("{module}: malformed data: {message}")]
    Format { module: &'static str, message: String },

    #[error("{module}: inconsistent metadata: {message}")]
    Consistency { module: &'static str, message: String },

    #[error("{module}: undefined result: {message}")]
    Undefined { module: &'static str, message: String },

    #[error("{module}: training diverged: {message}")]
    Diverged { module: &'static str, message: String },

    #[error("{module}: i/o error on {path}: {source}")]
    Io {
        module: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument { module, message: message.into() }
    }

    pub fn shape(module: &'static str, message: impl Into<String>) -> Self {
        Error::Shape { module, message: message.into() }
    }

    pub fn format(module: &'static str, message: impl Into<String>) -> Self {
        Error::Format { module, message: message.into() }
    }

    pub fn non_finite(module: &'static str, message: impl Into<String>) -> Self {
        Error::NonFinite { module, message: message.into() }
    }

    pub fn io(module: &'static str, path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { module, path: path.as_ref().display().to_string(), source }
    }

    /// Module that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::InvalidArgument { module, .. }
            | Error::Shape { module, .. }
            | Error::NonFinite { module, .. }
            | Error::Format { module, .. }
            | Error::Consistency { module, .. }
            | Error::Undefined { module, .. }
            | Error::Diverged { module, .. }
            | Error::Io { module, .. } => module,
        }
    }

    /// Stable machine-readable code, e.g. `shape_mismatch`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::Shape { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Format { .. } => "malformed",
            Error::Consistency { .. } => "inconsistent",
            Error::Undefined { .. } => "undefined",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
