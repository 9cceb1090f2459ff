use thiserror::Error;

/// Errors raised by the geometric core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid inverse depth {0}")]
    InvalidInverseDepth(f64),
    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    NearCutLocus(f64),
    #[error("rank deficient point configuration")]
    RankDeficient,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u32),
    #[error("optimizer stalled: damping exceeded {0:e}")]
    OptimizerStalled(f64),
    #[error("dangling anchor: keyframe {0} has no pose update and is not in the graph")]
    DanglingAnchor(u32),
    #[error("graph is not normalized")]
    NotNormalized,
    #[error("non-finite loss at gaussian {index}: {detail}")]
    NonFiniteLoss { index: usize, detail: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;
