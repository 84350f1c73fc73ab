use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite measurement for modality `{modality}`")]
    NonFinite { modality: String },

    #[error("unknown category `{category}` for modality `{modality}`")]
    UnknownCategory { modality: String, category: String },

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("modality index {0} out of range")]
    ModalityOutOfRange(usize),

    #[error("non-measurement token {0}")]
    NonMeasurementToken(usize),

    #[error("modality `{modality}` is {actual}, expected {expected}")]
    WrongKind {
        modality: String,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for table with {rows} rows ({what})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        rows: usize,
    },

    #[error("timestamp year {year} outside the year table [{base}, {end})")]
    YearOutOfRange { year: i32, base: i32, end: i32 },

    #[error("participant `{participant}`: {reason}")]
    Participant { participant: String, reason: String },

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("undefined percent effect: control-arm mean is zero")]
    UndefinedEffect,

    #[error("infeasible truncation for `{0}`: bounds retain less than 0.1% of the mass")]
    InfeasibleTruncation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
