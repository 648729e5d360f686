//! Central finite differences for checking analytic gradients.

/// Denominator floor for relative errors, so gradients that are zero on
/// both sides compare as equal instead of 0/0.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest elementwise relative error. Panics on length mismatch.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn both_zero_is_no_error() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
