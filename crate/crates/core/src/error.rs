use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("dimension mismatch: expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid image dimensions: {0}")]
    InvalidDimensions(String),

    #[error("image has {0} distinct labels; at most {max} are accepted for a segmented image", max = crate::image::MAX_PHASES)]
    TooManyPhases(usize),

    #[error("phase label {0} is not present in the image")]
    UnknownPhase(u8),

    #[error("displacement radius {radius} must be smaller than the shortest edge {min_edge}")]
    RadiusTooLarge { radius: usize, min_edge: usize },

    #[error("phase fraction {0} is too close to 0 or 1 for a variance estimate")]
    DegeneratePhaseFraction(f64),

    #[error("confidence level {0} is outside the accepted range")]
    InvalidConfidence(f64),

    #[error("target deviation of {target_pct}% is not reachable below {max_volume} voxels (best {best_pct:.4}%)")]
    TargetUnreachable {
        target_pct: f64,
        max_volume: f64,
        best_pct: f64,
    },

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("integral range fit is degenerate: {0}")]
    DegenerateFit(String),

    #[error("prediction error spread is indistinguishable from zero")]
    InsufficientSpread,

    #[error("source image edge {source_edge} is smaller than three times the sample edge {sample_edge}")]
    SourceTooSmall {
        source_edge: usize,
        sample_edge: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("internal numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable identifier, used in HTTP error bodies and CLI exit messages.
    pub fn code(&self) -> &'static str {
        match self {
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidDimensions(_) => "InvalidDimensions",
            Error::TooManyPhases(_) => "TooManyPhases",
            Error::UnknownPhase(_) => "UnknownPhase",
            Error::RadiusTooLarge { .. } => "RadiusTooLarge",
            Error::DegeneratePhaseFraction(_) => "DegeneratePhaseFraction",
            Error::InvalidConfidence(_) => "InvalidConfidence",
            Error::TargetUnreachable { .. } => "TargetUnreachable",
            Error::ImageTooSmall(_) => "ImageTooSmall",
            Error::DegenerateFit(_) => "DegenerateFit",
            Error::InsufficientSpread => "InsufficientSpread",
            Error::SourceTooSmall { .. } => "SourceTooSmall",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Numerical(_) => "Numerical",
            Error::Io(_) => "IoFailure",
            Error::Json(_) => "IoFailure",
        }
    }
}
