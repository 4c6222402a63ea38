use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("zero-dimension image")]
    ZeroDimension,
    #[error("image {width}x{height} is smaller than the 3x3 kernel")]
    ImageTooSmall { width: usize, height: usize },
    #[error("no foreground")]
    NoForeground,
    #[error("invalid contour: {0}")]
    InvalidContour(String),
    #[error("zero-perimeter contour")]
    ZeroPerimeter,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{signal_len} samples cannot carry {harmonics} harmonics (need more than {})", 2 * .harmonics)]
    InsufficientSamples { signal_len: usize, harmonics: usize },
    #[error("term count {0} out of range 1..=200")]
    TermCountOutOfRange(usize),
    #[error("sample count mismatch: {expected} vs {actual}")]
    SampleMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("newick syntax error at offset {offset}: {message}")]
    NewickSyntax { offset: usize, message: String },
    #[error("duplicate leaf label {0:?}")]
    DuplicateLabel(String),
    #[error("leaf sets differ; only in first: {only_first:?}; only in second: {only_second:?}")]
    LeafSetMismatch {
        only_first: Vec<String>,
        only_second: Vec<String>,
    },
    #[error("malformed {kind} at line {line}: {message}")]
    Format {
        kind: &'static str,
        line: usize,
        message: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line for its exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numeric,
    Contract,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite(_) => ErrorClass::Numeric,
            Error::Precondition(_)
            | Error::TermCountOutOfRange(_)
            | Error::InsufficientSamples { .. }
            | Error::Shape(_)
            | Error::SampleMismatch { .. } => ErrorClass::Contract,
            Error::Context { source, .. } => source.class(),
            _ => ErrorClass::Input,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn format_err(kind: &'static str, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        kind,
        line,
        message: message.into(),
    }
}
