//! Central finite-difference gradient checking.

use std::collections::HashMap;

use super::{grad, AutodiffError, Expr, Tensor};

/// Relative error `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Largest relative error between `grad(scalar, params)` and central
/// differences `(f(x+h) - f(x-h)) / 2h` over every parameter component.
///
/// The whole graph is re-evaluated for each perturbation, including any
/// gradient nodes it contains, so this also checks higher-order graphs.
pub fn finite_diff_check(scalar: &Expr, params: &[Expr], h: f64) -> Result<f64, AutodiffError> {
    if !(h > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!("step {h} must be > 0")));
    }
    let grads = grad(scalar, params)?;
    let mut worst = 0.0f64;
    for param in params {
        let analytic = grads.get(param).expect("grad covers params").value().clone();
        let base = param.value().clone();
        for k in 0..base.numel() {
            let eval_at = |delta: f64| -> Result<f64, AutodiffError> {
                let mut moved: Tensor = base.clone();
                moved.data_mut()[k] += delta;
                let overrides = HashMap::from([(param.id(), moved)]);
                Ok(scalar.evaluate_with(&overrides)?.item())
            };
            let numeric = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}
