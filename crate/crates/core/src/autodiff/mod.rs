//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.
//!
//! Build a computation on a [`Tape`] through [`Var`] handles, then call
//! [`Tape::backward`] on a scalar to obtain [`Gradients`].

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckError, GradCheckReport};
pub use tape::{BinaryKind, Gradients, NodeId, ReduceKind, Tape, UnaryKind, Var, Window};
