//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough context
//! to act on (offending shapes, counts, token IDs) rather than a bare message.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) disagree.
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// backward() was called on a tensor that is not a scalar.
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A tensor belongs to a different tape than the one operating on it.
    #[error("tensor does not belong to this tape")]
    ForeignTensor,

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Not enough distinct items to satisfy a request (e.g. vocabulary size).
    #[error("{what}: requested {requested}, only {available} available")]
    NotEnough {
        what: &'static str,
        requested: usize,
        available: usize,
    },

    /// A token id falls outside the vocabulary it is used against.
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    /// A cross-modal alignment column was never observed during alignment.
    #[error("no alignment evidence for speech token {0}")]
    UnalignedToken(u32),

    /// A target sequence cannot be emitted in the given number of frames.
    #[error("CTC infeasible: {frames} frames cannot emit target of length {target} with {repeats} adjacent repeats")]
    CtcInfeasible {
        frames: usize,
        target: usize,
        repeats: usize,
    },

    /// Aggregated statistics do not correspond to the batches they are used with.
    #[error("statistics/batch mismatch: checksum {expected:#018x} != {actual:#018x}")]
    StatsMismatch { expected: u64, actual: u64 },

    /// A serialized artifact is malformed or has the wrong magic/version.
    #[error("bad file format: {0}")]
    BadFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
