use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFiniteInput,

    #[error("non-finite objective")]
    NonFiniteObjective,

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty source")]
    EmptySource,

    #[error("invalid token id {0}")]
    InvalidTokenId(usize),

    #[error("not an MMVF file")]
    NotMmvf,

    #[error("corrupt feature file: {0}")]
    CorruptFeatures(String),

    #[error("misaligned corpus: {0}")]
    Misaligned(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("degenerate embedding")]
    DegenerateEmbedding,

    #[error("all target positions are padding")]
    AllPadding,

    #[error("gamma must lie in [0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("gradient explosion in {0}")]
    GradientExplosion(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("model has no visual attention")]
    NoVisualAttention,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
