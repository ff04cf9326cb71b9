use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("self-loop on node {node} (strict mode)")]
    SelfLoop { node: usize },

    #[error("isolated node {node}: degree-0 nodes are rejected")]
    IsolatedNode { node: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("matrix of dimension {n} exceeds dense-solver bound {bound}")]
    SizeBound { n: usize, bound: usize },

    #[error("{algorithm} did not converge within {iterations} iterations (worst residual {worst_residual:.3e})")]
    NonConvergence {
        algorithm: String,
        iterations: usize,
        worst_residual: f64,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear system is not positive definite (pivot {pivot:.3e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
