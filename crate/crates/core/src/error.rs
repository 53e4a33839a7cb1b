use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point projects behind the camera (depth {depth})")]
    PointBehindCamera { depth: f64 },

    #[error("degenerate edge ({i}, {j}): both denominators are zero")]
    DegenerateEdge { i: usize, j: usize },

    #[error("need at least 2 keypoints, got {0}")]
    TooFewKeypoints(usize),

    #[error("every depth candidate was masked out")]
    NoValidCandidates,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("sigma at index {index} must be positive, got {value}")]
    NonPositiveSigma { index: usize, value: f64 },

    #[error("could not place all keypoints in front of the camera after {0} draws")]
    UnprojectableInstance(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::PointBehindCamera { .. } => "PointBehindCamera",
            Error::DegenerateEdge { .. } => "DegenerateEdge",
            Error::TooFewKeypoints(_) => "TooFewKeypoints",
            Error::NoValidCandidates => "NoValidCandidates",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::NonPositiveSigma { .. } => "NonPositiveSigma",
            Error::UnprojectableInstance(_) => "UnprojectableInstance",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::EmptyDataset => "EmptyDataset",
            Error::Parse { .. } => "ParseError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
