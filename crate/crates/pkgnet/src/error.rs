use std::fmt;
use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug)]
pub enum Error {
    /// Dataset directory or artifact file is missing / unreadable.
    Io { path: PathBuf, source: std::io::Error },
    /// A frame image could not be decoded.
    ImageDecode { path: PathBuf, detail: String },
    /// Dataset layout violation (no videos, inconsistent frame sizes, gaps in numbering, ...).
    Dataset(String),
    /// Malformed or degenerate object-box row.
    BoxFile { line: usize, detail: String },
    /// Invalid configuration value(s). Each entry is one violation.
    Config(Vec<String>),
    /// Model construction failure (unknown backbone, impossible tap shape, ...).
    Model(String),
    /// Tensor shape mismatch between two operands.
    ShapeMismatch { context: &'static str, left: Vec<usize>, right: Vec<usize> },
    /// Checkpoint / weights archive problems (bad magic, version, truncation).
    Archive(String),
    /// Scoring or evaluation contract violation (single-class labels, missing video, ...).
    Eval(String),
    /// Training diverged (non-finite loss).
    NonFiniteLoss { epoch: usize, step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Self::ImageDecode { path, detail } => {
                write!(f, "failed to decode image {}: {detail}", path.display())
            }
            Self::Dataset(msg) => write!(f, "dataset error: {msg}"),
            Self::BoxFile { line, detail } => write!(f, "box file line {line}: {detail}"),
            Self::Config(violations) => {
                write!(f, "invalid config: {}", violations.join("; "))
            }
            Self::Model(msg) => write!(f, "model error: {msg}"),
            Self::ShapeMismatch { context, left, right } => {
                write!(f, "shape mismatch in {context}: {left:?} vs {right:?}")
            }
            Self::Archive(msg) => write!(f, "archive error: {msg}"),
            Self::Eval(msg) => write!(f, "eval error: {msg}"),
            Self::NonFiniteLoss { epoch, step } => {
                write!(f, "non-finite loss at epoch {epoch}, step {step}; aborting")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Stable one-word code for machine-parsable CLI errors.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::ImageDecode { .. } => "image",
            Self::Dataset(_) => "dataset",
            Self::BoxFile { .. } => "boxes",
            Self::Config(_) => "config",
            Self::Model(_) => "model",
            Self::ShapeMismatch { .. } => "shape",
            Self::Archive(_) => "archive",
            Self::Eval(_) => "eval",
            Self::NonFiniteLoss { .. } => "nonfinite",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
