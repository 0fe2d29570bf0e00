//! AutoClip: percentile-based adaptive gradient clipping, with the autodiff
//! engine, optimizers, separation losses, and experiment harness used to
//! study it on a synthetic two-speaker separation task.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clipping;
pub mod dynamics;
pub mod error;
pub mod grad;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use grad::{GradVector, Graph, Var};
pub use tensor::{Precision, Tensor};
