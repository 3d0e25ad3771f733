use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of the tensor container format. Each corruption mode is distinct.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"FHT1\"")]
    BadMagic([u8; 4]),
    #[error("truncated tensor file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("tensor extents {0:?} overflow the addressable element count")]
    ExtentOverflow(Vec<u32>),
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),
    #[error("numerical check failed: {0}")]
    Numerical(String),
    #[error("parameter group `{0}` is not part of the graph")]
    UnknownGroup(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("round {round}, client {client}: {source}")]
    Stage {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach round/client context to a failure raised inside a federated stage.
    pub fn at_stage(self, round: usize, client: usize) -> Self {
        Error::Stage {
            round,
            client,
            source: Box::new(self),
        }
    }

    /// The innermost error, with any stage context peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
