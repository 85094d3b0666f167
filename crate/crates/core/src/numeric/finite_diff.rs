//! Central finite differences, the reference route for every analytic gradient.

/// Step used by all gradient checks.
pub const FD_STEP: f64 = 1e-3;
/// Floor for the denominator of [`relative_error`].
pub const REL_FLOOR: f64 = 1e-8;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn central_difference_at(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], index: usize, step: f64) -> f64 {
    let mut x = point.to_vec();
    x[index] = point[index] + step;
    let plus = f(&x);
    x[index] = point[index] - step;
    let minus = f(&x);
    (plus - minus) / (2.0 * step)
}

pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    (0..point.len())
        .map(|i| central_difference_at(&mut f, point, i, step))
        .collect()
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
