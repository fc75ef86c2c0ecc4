use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants carry enough context to name the offending shapes, indices or
/// file locations. [`Error::exit_code`] maps each category onto the stable
/// process exit codes used by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible matrix shapes, e.g. a 2x3 by 2x2 product.
    #[error("{op}: dimension mismatch between {lhs} and {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A token index that does not fit the embedding table.
    #[error("sequence index {value} at position {position} out of range (vocabulary size {bound})")]
    Index {
        position: usize,
        value: usize,
        bound: usize,
    },

    /// An invalid parameter value (rates, eps, subsets, ...).
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An operation that requires nonempty input received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A class label outside the declared class range.
    #[error("label {value} out of range for {classes} classes")]
    Label { value: usize, classes: usize },

    /// Mismatched companion structures (e.g. caches built for another batch).
    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed line in a data file, with its 1-based line number.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A malformed or truncated model file.
    #[error("model format error: {0}")]
    Format(String),

    /// Model and data disagree on vocabulary size, max_len or class count.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl Error {
    /// Stable exit-code contract: 0 success, 1 usage, 2 I/O, 3 data format,
    /// 4 schema mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Parse { .. } | Error::Format(_) | Error::Label { .. } => 3,
            Error::SchemaMismatch(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs: format!("{}x{}", lhs.0, lhs.1),
            rhs: format!("{}x{}", rhs.0, rhs.1),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
