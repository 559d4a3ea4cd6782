//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod tensor;

pub use graph::{BatchStats, Gradients, Graph, NodeId, ParamId};
pub use tensor::{ConvGeom, Tensor};
