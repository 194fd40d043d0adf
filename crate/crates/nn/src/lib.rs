//! A compact reverse-mode automatic differentiation engine for small
//! convolutional networks on the CPU.
//!
//! Values are dense `f64` tensors in row-major NCHW layout. A [`Graph`] records
//! every operation of one forward pass; [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every trainable leaf. Parameters live in a
//! [`ParamStore`] keyed by dotted names and are updated by the optimizers in
//! [`optim`].
//!
//! Heavy inner loops (per-sample convolution, batched matmul, large
//! elementwise maps) go through [`exec`], which dispatches to rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! Reductions always accumulate in a fixed order, so results are bit-identical
//! between the two modes.

pub mod error;
pub mod exec;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Conv2dSpec, Gradients, Graph, PadMode, Var};
pub use optim::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig};
pub use params::{Init, ParamStore};
pub use tensor::Tensor;
