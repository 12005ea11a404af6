use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: axis {axis} invalid for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("non-finite value produced by {op}{}", hint.map(|h| format!(" ({h})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        hint: Option<&'static str>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("bundle truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("missing {what}: {name}")]
    Missing { what: &'static str, name: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
