//! Minimal reverse-mode differentiation over dense 2-D `f64` tensors.
//!
//! A [`Graph`] records every op as it is evaluated. Parameters live in a
//! [`ParamStore`] and enter a graph through [`Graph::param`]; after
//! [`Graph::backward`] their gradients are collected with
//! [`Gradients::param_grads`]. Graphs are single-threaded and cheap to build,
//! so the usual pattern is one graph per sample, with per-sample gradients
//! summed in sample order.

pub mod gradcheck;
mod graph;
mod params;
mod scan;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, Unary, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
