//! Dense `f64` tensors, a tape-based reverse-mode autodiff engine, and Adam.
//!
//! Everything here is single-threaded and deterministic: identical inputs
//! produce bit-identical outputs and gradients.

mod adam;
mod error;
mod gradcheck;
mod graph;
mod kernels;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use param::Parameter;
pub use tensor::Tensor;
