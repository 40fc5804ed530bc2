//! Finite-difference utilities used to validate analytic gradients in tests.

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn max_rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-4);
    (a - b).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_derivative_of_square() {
        let d = central_diff(|x| x * x, 3.0, 1e-5);
        assert!((d - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floors_small_values() {
        assert!(max_rel_err(1e-9, 0.0) < 1e-4);
        assert!(max_rel_err(1.0, 2.0) > 0.4);
    }
}
