use thiserror::Error;

/// Errors produced anywhere in the pose estimation pipeline.
#[derive(Debug, Error)]
pub enum OsopError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("point lies outside the normalization box")]
    OutOfBox,
    #[error("matrix is not a valid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("mesh parse error: {0}")]
    MeshParse(String),
    #[error("render covered no pixel")]
    EmptyRender,
    #[error("template {index:?} rendered empty")]
    EmptyTemplate { index: [usize; 3] },
    #[error("image {width}x{height} too small for {levels} feature levels")]
    ImageTooSmall {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("vector has zero variance")]
    ZeroVariance,
    #[error("feature depth mismatch: expected {expected}, found {found}")]
    DepthMismatch { expected: usize, found: usize },
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("degenerate denominator in triplet loss")]
    DegenerateDenominator,
    #[error("render has no foreground pixel")]
    EmptyForeground,
    #[error("coordinate bin mismatch: {0}")]
    BinMismatch(String),
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("no pose candidate places the points in front of the camera")]
    NoValidPose,
    #[error("need at least {needed} matches, got {got}")]
    NotEnoughMatches { needed: usize, got: usize },
    #[error("no consensus: best hypothesis has {best} inliers, need {needed}")]
    NoConsensus { best: usize, needed: usize },
    #[error("no point pairs within the trim radius")]
    EmptyOverlap,
    #[error("object not detected")]
    NoDetection,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = OsopError> = std::result::Result<T, E>;
