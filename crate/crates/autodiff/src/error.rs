use thiserror::Error;

use crate::graph::Primitive;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("primitive {0:?} is not registered in this graph")]
    UnregisteredPrimitive(Primitive),

    #[error("loss must be a scalar, found shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    MissingParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
}

impl AutodiffError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        AutodiffError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], found: &[usize]) -> Self {
        AutodiffError::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
