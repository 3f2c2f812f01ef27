use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("soft mask stack has no channels")]
    EmptyStack,

    #[error("channel has no positive mass")]
    EmptyChannel,

    #[error("zero-norm feature row at location {0}")]
    ZeroNormFeature(usize),

    #[error("timestep {requested} is not reachable on a {steps}-step schedule")]
    Timestep { requested: usize, steps: usize },

    #[error("reference bank is empty")]
    EmptyBank,

    #[error("frame {frame} inserted after frame {last}")]
    OutOfOrderFrame { frame: usize, last: usize },

    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize, trace: Vec<f64> },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("segmenter error: {0}")]
    Segmenter(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no sequences found under {0}")]
    NoSequences(PathBuf),

    #[error("missing annotation for the first frame of sequence {0}")]
    MissingFirstAnnotation(String),

    #[error("annotation {path} is not an indexed or grayscale label image")]
    PaletteMismatch { path: PathBuf },

    #[error("missing predictions: {0:?}")]
    MissingPredictions(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    PngDecode(#[from] png::DecodingError),

    #[error(transparent)]
    PngEncode(#[from] png::EncodingError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
