//! Dense reverse-mode automatic differentiation, parameter stores and optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{AdamConfig, AdamState, GradMap, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
