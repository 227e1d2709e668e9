use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Shapes, channel counts or hyperparameters do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// The training or evaluation data cannot support the requested operation.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A persisted file is malformed.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss {loss} at step {step} (tuples: {tuples})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        tuples: String,
    },

    #[error("no mutual matches")]
    NoMutualMatches,

    #[error("index is empty")]
    EmptyIndex,

    #[error("missing ground truth for queries: {}", .0.join(", "))]
    MissingGroundTruth(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Format { .. } => "format",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::NoMutualMatches => "no_mutual_matches",
            Error::EmptyIndex => "empty_index",
            Error::MissingGroundTruth(_) => "missing_ground_truth",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
