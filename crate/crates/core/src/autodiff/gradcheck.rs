//! Central finite-difference gradient checking.
//!
//! The checker is deliberately independent of the tape: it only needs a
//! black-box scalar function. Tests freeze analytic gradients against
//! `(f(x+h) − f(x−h)) / 2h` with h = 1e-5.

/// Central finite differences of a scalar function at `x`.
pub fn central_diff<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let hi = f(&probe);
        probe[i] = x[i] - h;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * h);
    }
    grad
}

/// Worst relative error over all coordinates, with an absolute floor of 1 so
/// near-zero gradients are compared absolutely.
pub fn max_abs_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_is_exact_on_quadratics() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_diff(f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rel_err_floors_at_one() {
        assert!(max_abs_rel_err(&[1e-9], &[0.0]) < 1e-8);
        assert!((max_abs_rel_err(&[2.0], &[1.0]) - 0.5).abs() < 1e-12);
    }
}
