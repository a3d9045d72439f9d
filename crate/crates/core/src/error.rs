//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("singular blended transform near point ({0:.5}, {1:.5}, {2:.5})", point[0], point[1], point[2])]
    SingularTransform { point: [f64; 3] },

    /// Bad user input: config keys, argument ranges, malformed files.
    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },

    #[error("frame {index}: {message}")]
    Frame { index: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
}

impl Error {
    pub fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure mid-run.
    /// The CLI maps validation errors to exit code 1 and the rest to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. } | Error::Invalid { .. } | Error::Frame { .. }
        )
    }
}
