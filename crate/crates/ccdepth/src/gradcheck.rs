//! Central finite-difference helpers shared by the gradient-check tests.

/// Central difference of a scalar function at `x0` with step `h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-6)
}

/// Default step for f64 central differences.
pub const FD_STEP: f64 = 1e-5;
