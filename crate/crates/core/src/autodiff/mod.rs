//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: a [`Tape`] records primitive operations
//! during the forward pass and replays them in reverse to accumulate
//! gradients. Everything is 64-bit; the metrics downstream involve
//! eigenvalues offset by 1e-5 where 32-bit precision is unsafe.
//!
//! [`linalg`] holds the dense eigenvalue/SVD routines (classical Jacobi
//! rotations) used by the spectral metrics; they operate on plain values and
//! are not differentiated through.

pub mod gradcheck;
pub mod linalg;
mod tape;

pub use tape::{Tape, Tensor, TensorId};
