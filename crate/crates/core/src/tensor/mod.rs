//! Tensor engine: dense arrays, a reverse-mode autodiff tape, raw kernels,
//! and finite-difference gradient verification.

pub mod array;
pub mod gradcheck;
pub mod kernels;
pub mod scalar;
pub mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
