use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate observation id {0}")]
    DuplicateId(u64),

    #[error("observation id {0} has no label")]
    UnmappedId(u64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("forward cache does not match the current network parameters")]
    StaleCache,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("all densities vanish for the given observation")]
    DegenerateDensity,

    #[error("label map mismatch: {0}")]
    LabelMapMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_)
            | Error::InvalidCoordinate { .. }
            | Error::DuplicateId(_)
            | Error::UnmappedId(_)
            | Error::LabelOutOfRange { .. }
            | Error::Empty(_)
            | Error::LabelMapMismatch(_) => 3,
            Error::Numeric(_)
            | Error::NonFiniteGradient(_)
            | Error::DegenerateDensity
            | Error::ShapeMismatch(_)
            | Error::StaleCache => 4,
            Error::Io { .. } => 5,
        }
    }
}
