//! Dense N-dimensional tensors and a define-by-run reverse-mode tape.
//!
//! Values live in [`Tensor`]. Differentiable computation happens on a
//! [`Graph`]: every primitive applied to a [`Var`] is recorded together with
//! its backward rule, and [`Graph::backward`] replays the record in reverse.
//! Trainable state is kept in a [`ParamStore`] so that parameter identity
//! survives across graphs, checkpoints and optimizer steps.

mod error;
mod gradcheck;
mod graph;
pub mod io;
pub mod kernels;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_with, param_gradient_check, GradCheckReport,
};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{broadcast_shape, Tensor};
