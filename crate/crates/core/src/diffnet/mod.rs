//! Reverse-mode differentiation, multi-layer perceptrons and the Adam optimizer.

mod adam;
mod mlp;
mod tape;
mod tensor;

pub use adam::{AdamState, TrainConfig};
pub use mlp::{Activation, Layer, Mlp, MlpRun};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("log of a non-positive value at node {node}")]
    Domain { node: NodeId },
    #[error("gradient does not cover the parameters: {0}")]
    MissingGradient(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("malformed network fragment: {0}")]
    Fragment(String),
}
