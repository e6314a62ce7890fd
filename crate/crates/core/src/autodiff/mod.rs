//! Dense-tensor reverse-mode automatic differentiation and the Adam optimizer.

mod adam;
mod graph;

pub use adam::{Adam, AdamConfig};
pub use graph::{logsumexp, push_sinusoid, sigmoid, softmax_in_place, softplus, CustomBackward, Gradients, Graph, Var};
