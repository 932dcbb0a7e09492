use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::dct::DctError;
use crate::motion::MotionError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Dct(#[from] DctError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("clip {id} has {frames} frames, fewer than {coeffs} DCT coefficients")]
    TooShort {
        id: String,
        frames: usize,
        coeffs: usize,
    },
    #[error("label not found: {0}")]
    LabelNotFound(String),
    #[error("insufficient normal samples: {found} clips labelled {label}, need at least 2")]
    InsufficientNormal { label: String, found: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("K = {k} out of range for a bank of {bank} vectors")]
    KOutOfRange { k: usize, bank: usize },
    #[error("degenerate labels: AUC needs at least one normal and one anomalous record")]
    DegenerateLabels,
    #[error("skeleton mismatch: {0}")]
    SkeletonMismatch(String),
    #[error("{0}")]
    ModelFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
