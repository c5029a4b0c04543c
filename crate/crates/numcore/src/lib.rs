//! Small dense-tensor toolkit: a recording graph with reverse-mode
//! differentiation, the Adam optimizer with a linear learning-rate decay,
//! and a finite-difference gradient checker.
//!
//! All arithmetic is `f64`. Gradients are accumulated into a [`ParamStore`]
//! in parameter registration order, so identical inputs give bit-identical
//! results.
//!
//! ```
//! use numcore::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let x = store.register("x", Tensor::scalar(3.0).unwrap()).unwrap();
//! let mut g = Graph::new();
//! let xv = g.param(&store, x);
//! let y = g.square(xv).unwrap();
//! g.backward(y, &mut store).unwrap();
//! assert_eq!(store.grad(x), &[6.0]);
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, relative_error, GradCheckConfig, GradCheckReport, Stencil};
pub use graph::{AttentionBlock, Graph, Mask, Var};
pub use optim::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use params::{init_rng, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("row {0} has no allowed entries")]
    FullyMasked(usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0} of an empty tensor")]
    Empty(&'static str),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
