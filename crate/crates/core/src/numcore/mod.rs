//! Dense `f64` tensors, a reverse-mode tape, parameter storage and
//! finite-difference gradient checking.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, grad_check_params};
pub use params::{Adam, GradAccumulator, Graph, Optimizer, ParamId, ParamStore, Trainable};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
