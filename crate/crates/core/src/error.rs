use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: kernel shape, loss weights, missing taps, layer shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs that do not satisfy an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    /// A sample where every difference is zero; signed-rank and z-score statistics are undefined.
    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("numerical failure in `{layer}`: {message}")]
    Numerical { layer: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            layer: layer.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Dataset(_) | Error::Degenerate(_) => 1,
            Error::Numerical { .. } => 2,
            Error::Format(_) | Error::Io { .. } | Error::Image { .. } => 3,
        }
    }
}
