//! Editable training for small classifiers.
//!
//! This crate trains multiclass models so that individual mistakes can later
//! be patched by a handful of gradient steps with little collateral damage,
//! and it measures how well that worked. The pieces:
//!
//! - [`tensor`], [`autodiff`]: dense f32/f64 tensors and reverse-mode
//!   differentiation that can differentiate through its own gradients, which
//!   the training objective needs (it backpropagates through an unrolled
//!   multi-step editor).
//! - [`models`]: small MLP classifiers with named, individually editable
//!   parameter groups, plus losses and synthetic data.
//! - [`constraints`]: edit targets expressed as "satisfied iff <= 0" scalar
//!   functions of the parameters.
//! - [`editors`]: the patching procedures themselves; k steps of GD, RProp,
//!   RMSProp, momentum or Adam on a single constraint, with early stopping.
//! - [`training`]: the outer loop that optimizes prediction quality together
//!   with edit reliability and locality, and a plain baseline for contrast.
//! - [`evaluation`]: reliability / locality / efficiency metrics over a
//!   batch of independent edits (drawdown, success rate, step counts,
//!   per-class breakdowns, and a low-rank view of edit side effects).
//! - [`data_io`]: checkpoints, dataset readers and report serialization.

pub mod autodiff;
pub mod constraints;
pub mod data_io;
pub mod editors;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::backward::{grad, GradientMap};
pub use autodiff::check::check_gradient;
pub use autodiff::Var;
pub use error::{Error, Result};
pub use tensor::{Dtype, Tensor, TensorData};
