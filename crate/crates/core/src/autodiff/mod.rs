//! Dense tensors, a reverse-mode differentiable graph, and Adam.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{softplus, Feed, Feeds, Gradients, Graph, Prefixed, Var};
pub use tensor::Tensor;

/// Named parameter blocks of one network, ordered by name.
pub type ParamSet = std::collections::BTreeMap<String, Tensor>;
