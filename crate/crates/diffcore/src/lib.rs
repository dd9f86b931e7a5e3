//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operators eagerly; [`Graph::backward`] sweeps the
//! tape in reverse from a scalar root. [`forward`], [`gradient`] and
//! [`finite_diff_check`] wrap the graph for expressions over named inputs.

mod error;
mod expr;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{DiffError, Result};
pub use expr::{
    finite_diff_check, finite_diff_check_wrt, forward, gradient, Bindings, Expr, FdReport, Vars,
};
pub use graph::{CustomOp, Gradients, Graph, NodeId};
pub use tensor::Tensor;
