//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar output yields [`Gradients`] for all leaves.
//! Heavy kernels (matmul, convolution, resampling) fan out over rayon when the
//! `parallel` feature is enabled and run sequentially otherwise.

mod graph;
pub mod kernels;
mod ops;
pub mod par;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;
