//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{sigmoid, BatchNormMode, Graph, NormStats, RunningStats, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
