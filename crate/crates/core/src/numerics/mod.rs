//! Tensors, reverse-mode autodiff, Adam, and finite-difference checks.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod real;
pub mod rng;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, StepStats};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use rng::{derive_seed, rng_from_seed, Rng};
pub use tensor::{matmul_values, softmax_values, Tensor};
