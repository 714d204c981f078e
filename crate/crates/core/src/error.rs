use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected shape {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: Shape,
        found: Shape,
    },
    #[error("stage {stage}: injected feature map has shape {found}, stage output is {expected}")]
    StageShape {
        stage: usize,
        expected: Shape,
        found: Shape,
    },
    #[error("{what}: non-finite value at element {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("depth value {value} at element {index} is negative")]
    NegativeDepth { index: usize, value: f32 },
    #[error("label value {value} at element {index} is not a class index (0, 1 or 2)")]
    InvalidLabel { index: usize, value: u8 },
    #[error("mask value {value} at element {index} is not binary")]
    NonBinaryMask { index: usize, value: u8 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
