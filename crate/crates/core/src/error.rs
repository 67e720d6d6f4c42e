use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid signal: {0}")]
    Signal(String),

    #[error("similarity undefined: signal has zero energy")]
    ZeroEnergy,

    #[error("covariance is singular (all-zero frame?)")]
    SingularCovariance,

    #[error("material {0} is not defined")]
    MissingMaterial(usize),

    #[error("path point does not match path: {0}")]
    PathMismatch(String),

    #[error("travel distance {distance:.2} m exceeds the padding headroom of {headroom:.2} m")]
    HeadroomExceeded { distance: f64, headroom: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
