//! Minimal differentiable substrate: a fixed op set with analytic backward
//! passes on a replayable graph, plus a finite-difference oracle.

use alloc::string::String;
use core::fmt;

mod fd;
mod graph;
mod kernels;
mod params;
mod tensor;

#[cfg(test)]
mod tests;

pub use fd::fd_check;
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::{matmul_acc, sigmoid, softplus};
pub use params::{bind, ParamStore};
pub use tensor::{broadcast_shape, numel_of, strides_of, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GraphError {
    Shape(String),
    UnknownName(String),
    MissingInput(String),
    BackwardBeforeForward,
    NonFinite(String),
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::Shape(msg) => write!(f, "shape error: {msg}"),
            GraphError::UnknownName(name) => write!(f, "unknown name '{name}'"),
            GraphError::MissingInput(name) => write!(f, "input '{name}' has no data"),
            GraphError::BackwardBeforeForward => write!(f, "backward called before forward"),
            GraphError::NonFinite(msg) => write!(f, "non-finite values: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GraphError {}
