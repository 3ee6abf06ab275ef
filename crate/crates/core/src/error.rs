use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The point cloud cannot support an oriented box: too few points or rank deficient.
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("invalid landmark: {0}")]
    InvalidLandmark(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("missing embedding for {0}")]
    MissingEmbedding(String),

    #[error("invalid embedding table: {0}")]
    InvalidEmbedding(String),

    #[error("semantic histogram dimension {classes}^{steps} does not fit in 64 bits")]
    HistogramTooLarge { classes: usize, steps: usize },

    #[error("no clique hypothesis with at least {min_size} correspondences")]
    EmptyHypothesisSet { min_size: usize },

    #[error("insufficient correspondences: {positive} with positive weight, need {required}")]
    InsufficientPairs { positive: usize, required: usize },

    /// Centered points are collinear or coincident, rotation about the line is unobservable.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("no hypothesis yielded a pose ({attempted} attempted)")]
    NoSolvableHypothesis { attempted: usize },

    #[error("no consensus: best inlier count {best} < {required}")]
    NoConsensus { best: usize, required: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {source_name}: {message}")]
    Parse {
        source_name: String,
        message: String,
    },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    /// Errors caused by bad inputs rather than by a failure to find a solution.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Io { .. }
                | Error::InvalidLandmark(_)
                | Error::InvalidRotation(_)
                | Error::InvalidEmbedding(_)
                | Error::MissingEmbedding(_)
                | Error::HistogramTooLarge { .. }
                | Error::InvalidConfig(_)
                | Error::DegenerateCloud(_)
        )
    }
}
