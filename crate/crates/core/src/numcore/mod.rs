//! Dense rank-2 tensors, a recording autodiff tape, and Adam/AdamW.

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};

pub use optim::{Optimizer, OptimizerKind, OptimizerSettings};
pub use tensor::Tensor;
