use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure category, used by front-ends to pick stable exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer index {index} outside [0, {n}]")]
    LayerIndexOutOfRange { index: usize, n: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("layer `{0}` has no pre-trained reference")]
    MissingPretrained(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(
        "effective rollback {rho} > 1 at step {step} on layer `{layer}` \
         (learning rate exceeds the base rate the penalty was scaled by)"
    )]
    ScheduleIncompatible { rho: f64, step: u64, layer: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("timestep {t} outside schedule range [1, {total}]")]
    StepOutOfRange { t: u64, total: u64 },

    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint contains non-finite value in layer `{0}`")]
    CheckpointNonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::LayerIndexOutOfRange { .. } | Error::ShapeMismatch { .. } => {
                ErrorCategory::Config
            }
            Error::MissingPretrained(_) | Error::StepOutOfRange { .. } => ErrorCategory::Config,
            Error::NonFinite(_) | Error::ScheduleIncompatible { .. } | Error::Diverged { .. } => {
                ErrorCategory::Numeric
            }
            Error::CheckpointVersion { .. }
            | Error::CheckpointCorrupt(_)
            | Error::CheckpointNonFinite(_)
            | Error::Io { .. } => ErrorCategory::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
