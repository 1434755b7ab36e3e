//! Dense `f64` tensors with a dynamic reverse-mode tape.

mod dense;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use dense::Tensor;
pub use gradcheck::{grad_check, GradCheckOptions, GradReport, ParamCheck};
pub use graph::{Backward, CustomBackward, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};

#[cfg(test)]
pub(crate) use graph::gelu;
