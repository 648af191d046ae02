use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): corners must satisfy min < max")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },

    #[error("box lies outside the {width}x{height} image")]
    BoxOutsideImage { width: u32, height: u32 },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("rank deficient data: requested {requested} components but only rank {rank} is achievable")]
    RankDeficient { requested: usize, rank: usize },

    #[error("not enough samples: need at least {needed}, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    #[error("training set needs both positive and negative examples")]
    SingleClass,

    #[error("category {category}: {source}")]
    Category {
        category: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("category index {index} out of range for {count} categories")]
    CategoryOutOfRange { index: usize, count: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("all-zero Fisher vector")]
    ZeroFisherVector,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
