//! Central finite-difference harness.
//!
//! Used by the test suites and by the `gradcheck` CLI command to validate
//! the hand-derived gradients. The numeric side only ever evaluates the
//! objective, never the analytic gradient it is checking.

use crate::tensor::Real;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_gradient(f: impl Fn(&[Real]) -> Real, x: &[Real], step: Real) -> Vec<Real> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let keep = probe[i];
        probe[i] = keep + step;
        let plus = f(&probe);
        probe[i] = keep - step;
        let minus = f(&probe);
        probe[i] = keep;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest absolute deviation between two gradients, scaled by the largest
/// magnitude either of them attains. Zero vectors compare equal.
pub fn max_rel_error(analytic: &[Real], numeric: &[Real]) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0 as Real, |m, &v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0 as Real, |m, (&a, &n)| m.max((a - n).abs()))
        / scale
}
