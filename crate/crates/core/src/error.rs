use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("mask is empty")]
    EmptyMask,
    #[error("image has no alpha support")]
    EmptyImage,
    #[error("histogram bin counts differ: {0} vs {1}")]
    BinMismatch(usize, usize),
    #[error("dimension mismatch: {expected} vs {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("pyramid with {levels} levels needs min dimension >= {min_dim}")]
    TooManyLevels { levels: usize, min_dim: usize },
    #[error("sampled points are degenerate, cannot fit affine transform")]
    DegenerateGeometry,
    #[error("no affine consensus: inlier ratio below threshold")]
    NoConsensus,
    #[error("transform is singular (|det| < 1e-9)")]
    SingularTransform,
    #[error("unknown element id {0}")]
    UnknownElement(u64),
    #[error("unknown object id {0}")]
    UnknownObject(u64),
    #[error("object id {0} already exists")]
    IdCollision(u64),
    #[error("frame {frame} out of range [0, {num_frames})")]
    FrameOutOfRange { frame: usize, num_frames: usize },
    #[error("invalid frame range {0}..={1}")]
    RangeError(usize, usize),
    #[error("easing function is not monotone on [0,1]")]
    NonMonotoneEase,
    #[error("accepted mappings share an element: {0}")]
    InconsistentSelection(String),
    #[error("parse error at {context}: {message}")]
    ParseError { context: String, message: String },
    #[error("unsupported program version {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("scene script error: {0}")]
    ScriptError(String),
    #[error("mapping logs cover different frames: {0}")]
    LogMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png error for {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ParseError { context: context.into(), message: message.into() }
    }

    pub fn dims(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::DimensionMismatch { expected: expected.into(), actual: actual.into() }
    }
}
