//! Crate-wide error type.
//!
//! Everything fallible returns [`Result`]. Variants carry enough structure
//! that callers (and test assertions) can match on the failure class instead
//! of parsing strings; messages still name the offending shapes / ids /
//! offsets because that is what you want in a terminal.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape/axis/index argument was invalid on its own.
    #[error("invalid dimension in {op}: {msg}")]
    Dim { op: &'static str, msg: String },

    /// An id fell outside the range a vocabulary or codebook covers.
    #[error("id {id} out of range {lo}..{hi} ({what})")]
    IdRange {
        what: &'static str,
        id: usize,
        lo: usize,
        hi: usize,
    },

    /// Autograd bookkeeping failure (loss not on the tape, non-scalar loss...).
    #[error("graph error: {0}")]
    Graph(String),

    /// A batch that cannot be trained on (e.g. an all-false loss mask).
    #[error("invalid batch: {0}")]
    Batch(String),

    /// A requested fit/config is impossible (k larger than distinct frames...).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Token stream does not parse as a well-formed segment sequence.
    #[error("parse error at token {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    /// Prompt template and fillers disagree.
    #[error("template error: {0}")]
    Template(String),

    /// Malformed checkpoint bytes; `offset` is where reading stopped making sense.
    #[error("checkpoint format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Record failed task-arity validation.
    #[error("invalid record {id:?}: {msg}")]
    Record { id: String, msg: String },

    /// Numeric contract violation (non-finite logits and friends).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad user-facing configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
