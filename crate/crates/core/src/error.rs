use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // audio frontend
    #[error("utterance too short: {samples} samples, window needs {window}")]
    UtteranceTooShort { samples: usize, window: usize },
    #[error("corrupt audio: {0}")]
    CorruptAudio(String),
    #[error("degenerate normalization: need at least 2 valid frames, got {0}")]
    DegenerateNormalization(usize),
    #[error("invalid speed factor {0}")]
    InvalidSpeedFactor(f64),
    #[error("invalid frontend config: {0}")]
    InvalidFrontendConfig(String),
    #[error("invalid feature matrix: {0}")]
    InvalidFeatures(String),

    // autodiff
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain violation in {0}")]
    DomainViolation(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    // network
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence too short for regressor: {0} valid frames")]
    SequenceTooShort(usize),
    #[error("missing parameter {0}")]
    MissingParameter(String),

    // objectives
    #[error("target unalignable: {needed} frames needed, {available} available")]
    TargetUnalignable { needed: usize, available: usize },
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("CCC undefined for batch size {0}")]
    CccUndefined(usize),

    // metrics
    #[error("empty reference transcript")]
    EmptyReference,
    #[error("AUC undefined: {0}")]
    AucUndefined(String),
    #[error("correlation undefined: {0}")]
    CorrelationUndefined(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    // trainer
    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    // workbench
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest errors: {}", .0.join("; "))]
    Manifest(Vec<String>),
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
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
}
