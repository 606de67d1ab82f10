//! Minimal dense tensors and a reverse-mode autodiff tape.
//!
//! Tensors are row-major with explicit shapes. The only implicit broadcast is the bias
//! add along the last axis inside [`Graph::linear`] and [`Graph::conv2d`].

mod check;
mod element;
mod error;
mod graph;
mod kernels;
pub mod nn;
mod tensor;

pub use check::{grad_check, GradCheckReport, DEFAULT_EPS, REL_FLOOR};
pub use element::{gemm, DType, Element};
pub use error::{Result, TensorError};
pub use graph::{softmax, Gradients, Graph, Reduction, Var};
pub use kernels::{ConvGeom, PoolGeom};
pub use tensor::Tensor;
