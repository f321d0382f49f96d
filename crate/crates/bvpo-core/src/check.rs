//! Numerical verification helpers.
//!
//! Central finite differences are the independent oracle used throughout the
//! test suites to validate analytic gradients; they never call the analytic
//! gradient paths they check.

/// Central-difference gradient of `f` at `theta` with step `h` in every
/// coordinate.
pub fn central_difference_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let original = probe[i];
        probe[i] = original + h;
        let upper = f(&probe);
        probe[i] = original - h;
        let lower = f(&probe);
        probe[i] = original;
        grad[i] = (upper - lower) / (2.0 * h);
    }
    grad
}

/// Largest absolute componentwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in max_abs_diff");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Squared Euclidean norm.
pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in dot");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
