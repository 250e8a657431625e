use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{what}: expected {expected}, got {actual}")]
    Dimension {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("loss node must be scalar, found shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("objective is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("label {label} at frame {frame} is outside [0, {count})")]
    LabelOutOfRange {
        frame: usize,
        label: usize,
        count: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: malformed data at byte offset {offset}: {message}")]
    Format {
        context: String,
        offset: usize,
        message: String,
    },

    #[error("config fingerprint mismatch: checkpoint has {found}, configuration gives {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("utterance {id}: missing file {}", path.display())]
    MissingFile { id: String, path: PathBuf },

    #[error("split overlap: utterance {0} is in both train and test")]
    SplitOverlap(String),

    #[error("corpus has no ground-truth factors for utterance {0}")]
    MissingTruth(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            actual,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numerical(_) | Error::NonDeterministic { .. } => 3,
            _ => 2,
        }
    }
}
