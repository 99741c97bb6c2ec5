use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the model, data, or training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing features for node {0}")]
    MissingFeature(usize),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("training diverged at batch {batch} of epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 1,
            Error::Parse { .. }
            | Error::MissingFeature(_)
            | Error::DegenerateData(_)
            | Error::Io { .. } => 2,
            Error::Domain(_) | Error::Numeric(_) | Error::Divergence { .. } => 3,
        }
    }
}
