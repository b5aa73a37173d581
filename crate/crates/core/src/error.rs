use std::path::PathBuf;

use thiserror::Error;

use crate::ir::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model failed validation: {}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("no layer with id {0}")]
    UnknownLayer(u32),

    #[error("structural error at layer {layer}: {reason}")]
    Structural { layer: u32, reason: String },

    #[error("unsupported model: {0}")]
    Unsupported(String),

    /// Injecting into or resizing this layer would change the model's
    /// input or output width.
    #[error("layer {0} sits on the model's input/output boundary")]
    IoBoundary(u32),

    #[error("layer {0} does not feed a positively homogeneous path")]
    NotHomogeneous(u32),

    #[error("invalid permutation of width {width}")]
    InvalidPermutation { width: usize },

    #[error("layer {layer}: input channel {channel} has no cancellation partner")]
    NoPartner { layer: u32, channel: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Extraction could not run because the suspect model's tensors no
    /// longer have the shape the watermark key was built for.
    #[error("dimension mismatch in {what}: key expects {expected}, model has {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("message of {bits} bits exceeds capacity {capacity} of the target")]
    Capacity { bits: usize, capacity: usize },

    #[error("embedding did not converge within {steps} steps ({wrong} bits still wrong)")]
    NonConvergence { steps: usize, wrong: usize },

    #[error("bit strings differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("decision threshold {0} outside (0, 1)")]
    Threshold(f64),

    #[error("corrupt model file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn is_dimension_mismatch(&self) -> bool {
        matches!(self, Error::DimensionMismatch { .. })
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
