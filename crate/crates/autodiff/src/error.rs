use thiserror::Error;

/// Failures raised while recording or differentiating a computation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    /// Operand shapes do not conform to the operator's contract.
    #[error("{op}: shape contract violated: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A forward operator produced NaN or infinity.
    #[error("{op} (node {node}) produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },
    /// `backward` was called on a node holding more than one element.
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    /// A seed gradient does not match its node.
    #[error("seed gradient for node {node} has shape {got:?}, expected {expected:?}")]
    SeedShape {
        node: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Shape {
        op,
        detail: detail.into(),
    })
}
