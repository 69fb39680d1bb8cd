//! Central finite-difference gradient verification.

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let fp = f(&xs);
        xs[i] = orig - step;
        let fm = f(&xs);
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * step));
    }
    grad
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b||_2 / max(||a||_2 + ||b||_2, tiny)`; 0 when both are ~zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let denom = l2_norm(a) + l2_norm(b);
    if denom < 1e-12 {
        0.0
    } else {
        diff / denom
    }
}

/// Default step for f64 central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_polynomial() {
        // f(x, y) = x^2 y + 3y
        let f = |v: &[f64]| v[0] * v[0] * v[1] + 3.0 * v[1];
        let x = [1.5, -2.0];
        let g = finite_diff_gradient(f, &x, DEFAULT_STEP);
        let expected = [2.0 * 1.5 * -2.0, 1.5 * 1.5 + 3.0];
        assert!(relative_error(&g, &expected) < 1e-8);
    }

    #[test]
    fn relative_error_of_zeros_is_zero() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }
}
