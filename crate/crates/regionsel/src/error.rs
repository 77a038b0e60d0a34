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

    #[error("malformed header: {0}")]
    Header(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("label {label} at voxel {voxel} is out of range for {regions} regions")]
    LabelOutOfRange { label: u32, voxel: usize, regions: usize },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inconsistent state: {0}")]
    InconsistentState(String),

    #[error("sampler failure in {stage}: {detail}")]
    SamplerFailure { stage: String, detail: String },

    #[error("degenerate sufficient statistics: {0}")]
    DegenerateStatistics(String),

    #[error("evidence underflow: {0}")]
    EvidenceUnderflow(String),

    #[error("problem size {size} exceeds the configured cap {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("feasible range is empty: {0}")]
    EmptyRange(String),

    #[error("EM did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a pipeline stage name to sampler-side failures.
    pub fn at_stage(self, stage: &str) -> Self {
        match self {
            Error::SamplerFailure { stage: s, detail } => Error::SamplerFailure {
                stage: format!("{stage}/{s}"),
                detail,
            },
            Error::DegenerateStatistics(d) => Error::SamplerFailure {
                stage: stage.to_string(),
                detail: format!("degenerate statistics: {d}"),
            },
            Error::EvidenceUnderflow(d) => Error::EvidenceUnderflow(format!("{stage}: {d}")),
            other => other,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Header(_) => "malformed-header",
            Error::PayloadMismatch { .. } => "payload-mismatch",
            Error::LabelOutOfRange { .. } => "label-out-of-range",
            Error::NonFinite(_) => "non-finite",
            Error::Shape(_) => "shape-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InconsistentState(_) => "inconsistent-state",
            Error::SamplerFailure { .. } => "sampler-failure",
            Error::DegenerateStatistics(_) => "degenerate-statistics",
            Error::EvidenceUnderflow(_) => "evidence-underflow",
            Error::CapExceeded { .. } => "cap-exceeded",
            Error::EmptyRange(_) => "empty-range",
            Error::NoConvergence(_) => "no-convergence",
            Error::Config(_) => "config",
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::CapExceeded { .. } => 2,
            Error::Io { .. }
            | Error::Header(_)
            | Error::PayloadMismatch { .. }
            | Error::LabelOutOfRange { .. }
            | Error::NonFinite(_)
            | Error::Shape(_)
            | Error::InconsistentState(_)
            | Error::EmptyRange(_) => 3,
            Error::SamplerFailure { .. }
            | Error::DegenerateStatistics(_)
            | Error::EvidenceUnderflow(_)
            | Error::NoConvergence(_) => 4,
        }
    }
}
