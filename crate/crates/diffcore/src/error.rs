use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient requested for non-scalar root of shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("variable `{0}` is not bound")]
    Unbound(String),

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, DiffError>;
