use std::path::PathBuf;

use thiserror::Error;

use crate::kcore::Domain;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain mismatch: expected {expected:?}, found {found:?}")]
    Domain { expected: Domain, found: Domain },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible sampling budget: {0}")]
    Budget(String),

    #[error(
        "ACS region too small: {equations} fit equations for {unknowns} unknowns (need {required})"
    )]
    AcsTooSmall {
        equations: usize,
        unknowns: usize,
        required: usize,
    },

    #[error("singular GRAPPA normal equations (offset {offset}, coil {coil})")]
    SingularFit { offset: usize, coil: usize },

    #[error("kernel geometry does not match mask: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
