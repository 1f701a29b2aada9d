//! Minimal reverse-mode differentiation over dense `f64` tensors, plus the
//! Adam optimizer used to train every model in the crate.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tensor::Tensor;

