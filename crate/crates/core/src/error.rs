use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("head architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("loss node must be scalar, found {0} elements")]
    NonScalarLoss(usize),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("iso-surface vanished at stage-2 step {step}: extraction produced no triangles (check tau)")]
    IsoSurfaceVanished { step: usize },

    #[error("empty mesh")]
    EmptyMesh,

    #[error("mesh has zero total area")]
    ZeroArea,

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("missing ground-truth channel: {0}")]
    MissingChannel(&'static str),

    #[error("{path}: parse error at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
