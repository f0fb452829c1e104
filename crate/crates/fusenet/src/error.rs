use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] fusenet_core::Error),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable snake-case name for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => core_kind(e),
            Error::Io { .. } => "io_failure",
            Error::BadMagic(_) => "bad_magic",
            Error::HeaderMismatch(_) => "header_mismatch",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::Usage(_) => "usage_error",
        }
    }
}

fn core_kind(e: &fusenet_core::Error) -> &'static str {
    use fusenet_core::Error as E;
    match e {
        E::ShapeMismatch(_) => "shape_mismatch",
        E::InvalidVolume(_) => "invalid_volume",
        E::TargetSmaller { .. } => "target_smaller",
        E::EmptyVolume => "empty_volume",
        E::DegenerateWindow { .. } => "degenerate_window",
        E::BadLabel(_) => "bad_label",
        E::EmptyDataset => "empty_dataset",
        E::FrozenViolation(_) => "frozen_violation",
        E::EmptyMask(_) => "empty_mask",
        E::NoForeground => "no_foreground",
        E::BadFractions(_) => "bad_fractions",
        E::DegenerateLabels => "degenerate_labels",
        E::MissingPredictions(_) => "missing_predictions",
        E::BadGeometry(_) => "bad_geometry",
        E::BadConfig(_) => "bad_config",
    }
}

pub type Result<T> = std::result::Result<T, Error>;
