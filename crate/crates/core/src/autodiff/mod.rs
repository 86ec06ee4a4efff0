//! Reverse-mode automatic differentiation over dense `f64` arrays with
//! support for differentiating through gradient steps.
//!
//! Graphs are built eagerly: each [`Expr`] carries its computed value and
//! shape errors are raised at construction. [`grad`] returns gradients as
//! further `Expr` nodes, so second-order derivatives come from calling it
//! again on an expression that contains them.
//!
//! `ln` and division are guarded by adding [`EPS`] to the argument and the
//! denominator respectively.

mod check;
mod expr;
mod grad;
mod tensor;

pub use check::{finite_diff_check, relative_error};
pub use expr::{Expr, Op};
pub use grad::{clip_by_norm, grad, GradMap};
pub use tensor::Tensor;

/// Guard added to log arguments and division denominators.
pub const EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
