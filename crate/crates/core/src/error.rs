use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("target dims {target:?} smaller than volume dims {dims:?}")]
    TargetSmaller { dims: [usize; 3], target: [usize; 3] },
    #[error("empty volume")]
    EmptyVolume,
    #[error("degenerate intensity window ({low}, {high})")]
    DegenerateWindow { low: f32, high: f32 },
    #[error("label {0} outside the class set")]
    BadLabel(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("gradient reached a frozen parameter: {0}")]
    FrozenViolation(String),
    #[error("empty mask: {0}")]
    EmptyMask(&'static str),
    #[error("no voxel matches the guide labels")]
    NoForeground,
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("scores need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("missing prediction for scan {0}")]
    MissingPredictions(String),
    #[error("bad phantom geometry: {0}")]
    BadGeometry(String),
    #[error("bad config: {0}")]
    BadConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;
