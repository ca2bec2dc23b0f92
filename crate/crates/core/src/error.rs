use std::path::PathBuf;

/// Errors raised anywhere in the model, training and analysis stack.
#[derive(Debug, thiserror::Error)]
pub enum SspError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SspError>;

impl SspError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        SspError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SspError::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SspError::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        SspError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SspError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// 2 = configuration, 3 = numeric abort, 4 = missing artifact, 1 = anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SspError::Config(_) => 2,
            SspError::Numeric(_) => 3,
            SspError::Missing(_) => 4,
            _ => 1,
        }
    }
}
