//! Crate-wide error type.
//!
//! Every variant belongs to one of three failure classes (usage, data,
//! numerical). The command-line front end maps the class onto its exit code.

use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure class, one per documented process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration or arguments (exit 1).
    Usage,
    /// Unreadable, corrupt or inconsistent data (exit 2).
    Data,
    /// Divergence, non-convergence or degenerate statistics (exit 3).
    Numerical,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// Grid smaller than the 4x4 bicubic support.
    #[error("grid too small: {nx}x{ny} (need at least 4x4)")]
    GridTooSmall { nx: usize, ny: usize },

    /// Grid specification violates an invariant.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// Requested depth outside the source depth range.
    #[error("depth {depth} m outside source range [{min}, {max}] m")]
    Extrapolation { depth: f64, min: f64, max: f64 },

    /// Destination interval is not a multiple of the source interval.
    #[error("incompatible time interval: {dst} h is not a multiple of {src} h")]
    IncompatibleInterval { src: f64, dst: f64 },

    /// Tensor or field shapes disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Two series are not on the same grid / time axis.
    #[error("misaligned series: {0}")]
    Misaligned(String),

    /// Max pooling on an odd spatial size.
    #[error("odd spatial dimension {h}x{w} for 2x2 pooling")]
    OddDimension { h: usize, w: usize },

    /// No valid cells under the mask.
    #[error("empty mask: no valid cells")]
    EmptyMask,

    /// Architecture invariant violated.
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    /// Sample window longer than the available range.
    #[error("window of {window} frames exceeds range of {available} frames")]
    WindowExceedsRange { window: usize, available: usize },

    /// Not enough model frames before the requested time.
    #[error("insufficient history for frame {frame}: window needs {window} frames")]
    InsufficientHistory { frame: usize, window: usize },

    /// Loss became NaN or infinite during training.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    /// Power iteration failed to converge.
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),

    /// Zero variance where a statistic needs spread.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// Baseline MSE of zero in the gain formula.
    #[error("zero baseline: mean model MSE is 0")]
    ZeroBaseline,

    /// Malformed field file.
    #[error("bad field file {path}: {reason}")]
    BadField { path: PathBuf, reason: String },

    /// Malformed or tampered checkpoint.
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    /// Checkpoint written by an unknown format version.
    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | WindowExceedsRange { .. } | InvalidArch(_) => ErrorClass::Usage,
            NonFiniteLoss { .. } | NonConvergence(_) | DegenerateVariance(_) | ZeroBaseline => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
