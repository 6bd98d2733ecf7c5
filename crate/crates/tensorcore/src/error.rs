use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: index {index} out of range for size {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("tensor data has {actual} values but shape {shape:?} needs {expected}")]
    DataLength { shape: Vec<usize>, expected: usize, actual: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;
