//! Central finite differences for gradient verification.

use crate::error::{Fl2tError, Result};

/// Default probe step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences with step `h`.
///
/// Each coordinate is probed at `x[i] +/- h` with every other coordinate
/// held fixed. A non-finite function value at any probe aborts with an
/// error naming the offending coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Fl2tError::Domain(format!(
            "finite difference step must be positive and finite, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&probe);
        probe[i] = original - h;
        let minus = f(&probe);
        probe[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Fl2tError::Numerical(format!(
                "finite difference probe at coordinate {i} produced a non-finite value \
                 (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error between a numerical and an analytic gradient entry.
///
/// The denominator is floored at 1e-3 so that entries whose true magnitude
/// sits below the finite-difference noise floor are compared absolutely
/// (|diff| < tol * 1e-3) instead of blowing up the ratio.
pub fn relative_error(numerical: f64, analytic: f64) -> f64 {
    (numerical - analytic).abs() / numerical.abs().max(analytic.abs()).max(1e-3)
}

/// Largest relative error across two gradient vectors.
pub fn max_relative_error(numerical: &[f64], analytic: &[f64]) -> f64 {
    debug_assert_eq!(numerical.len(), analytic.len());
    numerical
        .iter()
        .zip(analytic)
        .map(|(n, a)| relative_error(*n, *a))
        .fold(0.0, f64::max)
}
