use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Two tensors cannot be combined because their shapes disagree.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A reduction or slice addressed an axis the tensor does not have.
    InvalidAxis { axis: usize, rank: usize },
    /// A softmax normalization group contained no unmasked entry.
    EmptyAttentionGroup,
    /// `backward` was called on a tensor that is not a tracked scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// An argument violated an operation's precondition.
    InvalidArgument { op: &'static str, message: String },
    /// A model or run configuration is inconsistent.
    Config(String),
    /// A word could not be resolved in the vocabulary.
    UnknownWord(String),
    /// Checkpoint or config file could not be parsed.
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank-{rank} tensor")
            }
            Error::EmptyAttentionGroup => write!(f, "empty attention group: every entry masked"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a tracked scalar loss, got shape {shape:?}")
            }
            Error::InvalidArgument { op, message } => write!(f, "{op}: {message}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::UnknownWord(w) => write!(f, "word not in vocabulary: {w:?}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
