//! Minimal tensor and reverse-mode differentiation engine backing the model.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
