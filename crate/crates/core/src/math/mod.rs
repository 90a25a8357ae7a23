//! Numeric foundation: dense matrices, reverse-mode differentiation, Adam.

pub mod autodiff;
pub mod matrix;
pub mod optim;

pub use autodiff::{fd_grad, max_rel_err, Gradients, Tape, Value};
pub use matrix::{dropout_apply, softmax_rows, Mask, Matrix};
pub use optim::{grad, AdamConfig, Bindings, ParamStore};
