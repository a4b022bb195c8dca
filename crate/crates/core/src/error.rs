use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants fall into three families that the CLI maps onto exit codes:
/// usage problems, data problems (files, formats, inconsistent inputs) and
/// numeric failures (non-finite losses or gradients).
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {}: {reason}", path.display())]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported encoding in {}: {reason}", path.display())]
    UnsupportedEncoding { path: PathBuf, reason: String },

    #[error("empty audio: {}", .0.display())]
    EmptyAudio(PathBuf),

    #[error("{}:{line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("{}:{line}: duplicate utterance id `{id}`", path.display())]
    DuplicateId { path: PathBuf, line: usize, id: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("silent signal: SNR is undefined")]
    SilentSignal,

    #[error("degenerate trial list: {0}")]
    DegenerateTrials(String),

    #[error("mismatched trial coverage: {0}")]
    TrialMismatch(String),

    #[error("insufficient speakers: need {needed}, found {found}")]
    InsufficientSpeakers { needed: usize, found: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trial line {line}: {source}")]
    AtTrial {
        line: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// The underlying error with any trial-line context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTrial { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 1 for configuration (usage) errors, 3 for numeric
    /// failures, 2 for everything else (data errors).
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }

    /// True for failures caused by non-finite arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self.root(), Error::Numeric(_))
    }
}
