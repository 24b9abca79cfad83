use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate batch in {op}: {detail}")]
    DegenerateBatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("gradient check invalid: {0}")]
    GradCheckInvalid(String),

    #[error("training degenerate: {0}")]
    TrainingDegenerate(String),

    #[error("undefined rate: {0}")]
    UndefinedRate(String),

    #[error("missing prerequisite stage `{stage}`")]
    Prerequisite { stage: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {path}: field `{field}`: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::DegenerateBatch { .. } => "degenerate_batch",
            Error::NonFinite(_) => "non_finite",
            Error::GradCheckInvalid(_) => "gradcheck_invalid",
            Error::TrainingDegenerate(_) => "training_degenerate",
            Error::UndefinedRate(_) => "undefined_rate",
            Error::Prerequisite { .. } => "prerequisite",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }
}
