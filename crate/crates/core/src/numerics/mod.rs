//! Deterministic dense tensors with reverse-mode differentiation.
//!
//! Values are row-major `f64`. Operations live on [`Tape`]; parameters live
//! in a [`ParamStore`] and enter a tape as borrowed leaves, so a forward
//! pass never copies weights.

mod counter;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use counter::{set_verify, MacCounter, Precision};
pub use gradcheck::{grad_check, grad_check_param, grad_check_with};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{AttnMask, BackwardReport, Tape, Var};
pub use tensor::Tensor;
