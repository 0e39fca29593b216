//! Central finite-difference gradient verification.
//!
//! Used throughout the test suites to check every differentiable path
//! against an oracle that never touches the tape's backward code.

use alloc::vec::Vec;

use crate::math;

/// Default perturbation for central differences.
pub const FD_EPS: f64 = 1e-5;
/// Default relative tolerance at 64-bit.
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator guard: gradients below this magnitude compare absolutely.
pub const FD_ABS_GUARD: f64 = 1e-3;

/// Central finite differences of `f` at `x`, perturbing one coordinate at a
/// time: `(f(x+e_i*eps) - f(x-e_i*eps)) / (2*eps)`.
pub fn central_diff<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = f(&xp);
        xp[i] = orig - eps;
        let fm = f(&xp);
        xp[i] = orig;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Largest guarded relative error between two gradient vectors:
/// `|a - b| / max(|a|, |b|, guard)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], guard: f64) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &b) in analytic.iter().zip(numeric.iter()) {
        let denom = math::abs(a).max(math::abs(b)).max(guard);
        let e = math::abs(a - b) / denom;
        if e > worst {
            worst = e;
        }
    }
    worst
}

/// Convenience: check an analytic gradient against central differences of
/// `f` with the default tolerances. Returns the worst relative error.
pub fn check<F>(f: F, x: &[f64], analytic: &[f64]) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = central_diff(f, x, FD_EPS);
    max_rel_err(analytic, &numeric, FD_ABS_GUARD)
}
