//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("corrupt blob `{path}`: {reason}")]
    CorruptBlob { path: String, reason: String },

    #[error("class `{class}` is assigned to more than one split")]
    SplitOverlap { class: String },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("degenerate statistics: channel {channel} has zero standard deviation")]
    DegenerateStats { channel: usize },

    #[error("class `{class}` has {available} images but {needed} are required")]
    InsufficientImages {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("unknown or unsupported technique `{technique}` for mode `{mode}`")]
    UnknownTechnique { technique: String, mode: String },

    #[error("way slot {slot} has zero total label mass")]
    DegenerateClass { slot: usize },

    #[error("non-finite value produced at stage `{stage}`")]
    NumericFailure { stage: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category slug, used by the CLI when reporting
    /// failures on stderr and for mapping to exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Manifest(_) => "manifest",
            Error::CorruptBlob { .. } => "corrupt-blob",
            Error::SplitOverlap { .. } => "split-overlap",
            Error::Geometry(_) => "geometry",
            Error::DegenerateStats { .. } => "degenerate-statistics",
            Error::InsufficientImages { .. } => "insufficient-images",
            Error::UnknownTechnique { .. } => "unknown-technique",
            Error::DegenerateClass { .. } => "degenerate-class",
            Error::NumericFailure { .. } => "numeric-failure",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Json(_) => 3,
            Error::Manifest(_)
            | Error::CorruptBlob { .. }
            | Error::SplitOverlap { .. }
            | Error::Geometry(_) => 4,
            Error::InsufficientImages { .. }
            | Error::DegenerateStats { .. }
            | Error::DegenerateClass { .. } => 5,
            Error::NumericFailure { .. } => 6,
            Error::UnknownTechnique { .. } => 7,
        }
    }
}
