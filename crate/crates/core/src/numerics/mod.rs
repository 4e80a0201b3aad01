//! Dense fp64 tensors, a recording tape for reverse-mode gradients, and Adam.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{Adam, Parameter};
pub use gradcheck::{gradient_check, numeric_gradient, relative_error};
pub use graph::{Gradients, Graph, Var, LOG_FLOOR};
pub use tensor::Tensor;

pub(crate) use graph::plackett_luce;
