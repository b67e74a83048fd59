//! Reverse-mode autodiff on f64 `ndarray` tensors plus the Adam optimizer.
//! Single-threaded on purpose: training runs must be bit-reproducible, and
//! every op here has a deterministic forward and adjoint.

pub mod adam;
pub mod tape;

pub use adam::Adam;
pub use tape::{Grads, Tape, Var};
