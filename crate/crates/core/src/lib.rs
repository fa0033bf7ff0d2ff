//! Conformer and E-Branchformer encoder laboratory.
//!
//! Everything runs on a small reverse-mode autodiff tape over `f64`
//! tensors: the encoder layers, a CTC objective with greedy decoding, an
//! analytic parameter/MAC profiler cross-checked by an instrumented forward
//! pass, and a toy-scale training harness for stability sweeps.

pub mod attention;
pub mod autodiff;
pub mod ctc;
pub mod encoder;
pub mod harness;
pub mod model;
pub mod nn;
pub mod profiler;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
