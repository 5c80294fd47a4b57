//! Dense reverse-mode differentiation over `f64` tensors.
//!
//! Graphs are rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and enter a graph through [`Graph::param`].

pub mod check;
pub mod error;
pub mod graph;
pub mod store;
pub mod tensor;

pub use check::{compare_with_central_differences, finite_diff_check, relative_error, FdReport};
pub use error::{AutodiffError, Result};
pub use graph::{GatherIndex, Gradients, Graph, ParamId, Var};
pub use store::ParamStore;
pub use tensor::Tensor;
