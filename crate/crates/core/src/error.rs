use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: argument outside the domain: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("batch of size {size} is too small for {op}")]
    BatchTooSmall { op: &'static str, size: usize },
    #[error("selection failed for anchor {anchor}: {reason}")]
    Selection { anchor: usize, reason: &'static str },
    #[error("non-finite value in loss term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
