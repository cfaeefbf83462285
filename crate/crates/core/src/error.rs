use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or arguments (exit 1).
    Validation,
    /// A stage failed on otherwise valid input (exit 2).
    Runtime,
    /// Missing, unreadable or malformed files (exit 3).
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
            ErrorKind::Io => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at byte offset {offset}: expected \"PSCB\", found {found:?}")]
    BadMagic { offset: usize, found: Vec<u8> },

    #[error("unsupported EMB1 version {version} at byte offset {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },

    #[error("zero {which} in header at byte offset {offset}")]
    ZeroDimension { offset: usize, which: &'static str },

    #[error("truncated payload: expected {expected} bytes, file has {actual} (short at byte offset {actual})")]
    Truncated { expected: usize, actual: usize },

    #[error("trailing bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: usize },

    #[error("non-finite value at row {row}, col {col} (byte offset {offset})")]
    NonFiniteValue {
        row: usize,
        col: usize,
        offset: usize,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("labels file line {line}: {message}")]
    LabelParse { line: usize, message: String },

    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("affinity column of concept {concept} is all zero")]
    ZeroColumn { concept: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{0} must be row-normalized")]
    NotNormalized(&'static str),

    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("class {class} has no images")]
    EmptyClass { class: usize },

    #[error("concept record {index} has empty text")]
    EmptyConceptText { index: usize },

    #[error("{name} = {value} is out of range ({expected})")]
    OutOfRange {
        name: String,
        value: String,
        expected: &'static str,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("independent labeling requires an unmerged bank of single-class concepts (concept {concept})")]
    IndependentRequiresUnmerged { concept: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("no class has any concept")]
    NoAlignedClass,

    #[error("no concepts left: {0}")]
    NoConcepts(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn out_of_range(name: &str, value: impl ToString, expected: &'static str) -> Self {
        Error::OutOfRange {
            name: name.to_string(),
            value: value.to_string(),
            expected,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Io { .. }
            | BadMagic { .. }
            | UnsupportedVersion { .. }
            | ZeroDimension { .. }
            | Truncated { .. }
            | TrailingBytes { .. }
            | NonFiniteValue { .. }
            | Json { .. }
            | LabelParse { .. } => ErrorKind::Io,
            OutOfRange { .. } | Invalid(_) => ErrorKind::Validation,
            ZeroRow { .. }
            | ZeroColumn { .. }
            | DimensionMismatch(_)
            | NotNormalized(_)
            | ClassOutOfRange { .. }
            | EmptyClass { .. }
            | EmptyConceptText { .. }
            | IndependentRequiresUnmerged { .. }
            | NonFiniteLoss { .. }
            | NoAlignedClass
            | NoConcepts(_) => ErrorKind::Runtime,
        }
    }
}
