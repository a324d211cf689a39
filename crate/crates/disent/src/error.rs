//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain violation: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got dims {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root is not linked to this tape")]
    RootNotOnTape,

    #[error("{factor} label {value} out of range [0, {max})")]
    FactorOutOfRange {
        factor: &'static str,
        value: usize,
        max: usize,
    },

    #[error("lattice index {0} out of range [0, {1})")]
    IndexOutOfRange(usize, usize),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
