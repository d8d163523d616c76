//! Crate-wide error type.

use std::fmt;

/// Errors raised by tensor ops, memories, streams, and file formats.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform to an op's rule.
    Shape { op: &'static str, detail: String },
    /// A tensor contained NaN or Inf where finite values are required.
    NonFinite { op: &'static str },
    /// An operation that needs at least one element got none.
    Empty { what: &'static str },
    /// A class label is outside `0..num_classes`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// `backward` was called twice on the same tape without re-recording.
    TapeConsumed,
    /// An SGD update was requested for a parameter with no gradient entry.
    MissingGradient { name: String },
    /// Two parameter collections that must be structurally identical differ.
    StructureMismatch { detail: String },
    /// An index into a memory or batch is out of range.
    IndexOutOfRange { index: usize, len: usize },
    /// A configuration value fails validation.
    InvalidConfig { detail: String },
    /// A binary file violated its format; `offset` is the byte position.
    Format { offset: u64, detail: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::Empty { what } => write!(f, "{what}: empty input"),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::TapeConsumed => write!(f, "backward called on an already-consumed tape"),
            Error::MissingGradient { name } => write!(f, "no gradient for parameter {name}"),
            Error::StructureMismatch { detail } => write!(f, "structure mismatch: {detail}"),
            Error::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range (len {len})")
            }
            Error::InvalidConfig { detail } => write!(f, "invalid config: {detail}"),
            Error::Format { offset, detail } => {
                write!(f, "format error at byte {offset}: {detail}")
            }
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
