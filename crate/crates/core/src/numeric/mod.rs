//! Reverse-mode autodiff, Adam and the step-decay schedule.

#[cfg(test)]
pub(crate) mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamState, LrSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use tensor::Tensor;
