use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive camera depth ({0:.3e} m)")]
    NonPositiveDepth(f64),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("zero-length vector")]
    ZeroVector,
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("insufficient motion: {0}")]
    InsufficientMotion(String),

    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("invalid depth map: {0}")]
    InvalidDepthMap(String),

    #[error("keypoint segment is vertical; perpendicular planar direction undefined")]
    DegenerateAxis,
    #[error("reference direction is orthogonal to the target line; sign ambiguous")]
    AmbiguousSign,
    #[error("rank-deficient design matrix")]
    RankDeficient,
    #[error("optimization diverged: {0}")]
    NonFinite(String),
    #[error("roll reference is parallel to the surface normal")]
    DegenerateRoll,
    #[error("required keypoint {joint} missing in view {view}")]
    MissingKeypoint { joint: &'static str, view: usize },

    #[error("cameras do not view the torso ({0:.1}% of surface samples visible in the worst view)")]
    CameraMissesTorso(f64),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid torso: {0}")]
    InvalidTorso(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no valid folds")]
    NoValidFolds,
    #[error("target pixel missing in view {0}")]
    MissingPixel(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
