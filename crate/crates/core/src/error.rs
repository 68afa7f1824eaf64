use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unknown column {table}.{attribute}")]
    UnknownColumn { table: String, attribute: String },

    #[error("unknown table {0}")]
    UnknownTable(String),

    #[error("column {table}.{attribute} is a key column")]
    KeyColumnNotAllowed { table: String, attribute: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("output does not depend on any trainable parameter")]
    DetachedOutput,

    #[error("invalid node {node_type}:{index}")]
    InvalidNode { node_type: usize, index: usize },

    #[error("type mismatch: {0}")]
    TypeMismatch(String),

    #[error("graph is empty")]
    EmptyGraph,

    #[error("unknown seed type {0}")]
    UnknownSeedType(String),

    #[error("invalid seed: {0}")]
    InvalidSeed(String),

    #[error("column {table}.{attribute} has no observed values to draw from")]
    EmptyMarginal { table: String, attribute: String },

    #[error("negative {negative} is linked to target {target} by edge type {edge_type}")]
    NegativeIsLinked {
        edge_type: usize,
        negative: usize,
        target: usize,
    },

    #[error("node {0} has no context embedding")]
    UndefinedContext(usize),

    #[error("subgraph has no nodes")]
    EmptySubgraph,

    #[error("encoder for {0} was not fitted")]
    UnfittedEncoder(String),

    #[error("auc is undefined when only one class is present")]
    SingleClass,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty input")]
    Empty,

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),

    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
