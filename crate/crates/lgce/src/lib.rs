//! Language-guided cross-scale enhancement (LGCE) on top of a small
//! reverse-mode automatic-differentiation library.
//!
//! - [`tensor`]: dense `f64` tensors.
//! - [`tape`]: the autodiff tape and its operator set.
//! - [`params`]: named parameters, seeded init, checkpoints.
//! - [`nn`]: attention, transformer blocks, patch embedding, decoder head.
//! - [`lgce`]: the two-scale language-guided fusion module.
//! - [`gradcheck`]: finite-difference gradient verification.
//! - [`checks`]: the module's invariant suite.

pub mod checks;
pub mod gradcheck;
pub mod lgce;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
