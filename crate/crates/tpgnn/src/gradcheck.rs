//! Numeric gradient checking.
//!
//! Central differences over a flattened parameter vector, used by the test
//! suite to validate every analytic gradient the tape produces. The oracle
//! never touches the tape's backward pass: it only re-evaluates the forward
//! function, so it stays independent of the thing it checks.

/// Central-difference gradient of `f` at `theta` with step `h`.
///
/// `f` must be deterministic; it is called twice per coordinate.
pub fn numeric_gradient<F>(f: &F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Largest per-element relative error between an analytic and a numeric
/// gradient. The denominator is floored at 1e-6 so that near-zero gradients
/// are compared absolutely instead of amplifying finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = x0^2 + 3 x1, df = [2 x0, 3]
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let theta = [1.5, -2.0];
        let g = numeric_gradient(&f, &theta, 1e-5);
        assert!((g[0] - 3.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
        assert!(max_rel_err(&[3.0, 3.0], &g) < 1e-9);
    }

    #[test]
    fn rel_err_floors_small_denominators() {
        assert!(max_rel_err(&[0.0], &[1e-9]) < 1e-2);
        assert!(max_rel_err(&[1.0], &[2.0]) >= 0.5);
    }
}
