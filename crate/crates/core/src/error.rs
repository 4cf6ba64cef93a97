use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("corpus too small to split: {0} trainable records, need at least 10")]
    CorpusTooSmall(usize),

    #[error("insufficient era-disjoint candidates: {available} available, {needed} needed")]
    InsufficientNegatives { available: usize, needed: usize },

    #[error("negative from same era: {0}")]
    SameEraNegative(String),

    #[error("anchor {0} has zero candidates")]
    NoCandidates(usize),

    #[error("template example incomplete: {0}")]
    TemplateIncomplete(String),

    #[error("invalid template: {0}")]
    Template(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("cannot assemble incomplete attributes: missing {0}")]
    IncompleteAttributes(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("enhancement failed after {attempts} attempts: {last}")]
    EnhancementFailed { attempts: u32, last: String },

    #[error("invalid rating sheet from rater {rater_id}: {reason}")]
    InvalidRating { rater_id: String, reason: String },

    #[error("feature encoder {id}: {message}")]
    Encoder { id: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Singularity(_) => "singularity",
            Error::CorpusTooSmall(_) => "corpus_too_small",
            Error::InsufficientNegatives { .. } => "insufficient_negatives",
            Error::SameEraNegative(_) => "same_era_negative",
            Error::NoCandidates(_) => "no_candidates",
            Error::TemplateIncomplete(_) => "template_incomplete",
            Error::Template(_) => "template",
            Error::InvalidRecord(_) => "invalid_record",
            Error::IncompleteAttributes(_) => "incomplete_attributes",
            Error::Transport(_) => "transport",
            Error::EnhancementFailed { .. } => "enhancement_failed",
            Error::InvalidRating { .. } => "invalid_rating",
            Error::Encoder { .. } => "encoder",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
