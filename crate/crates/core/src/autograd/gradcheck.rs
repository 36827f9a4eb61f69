//! Central finite differences as a gradient oracle.

/// Central-difference gradient of `f` at `params`.
pub fn central_difference<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Fourth-order five-point stencil
/// `(8 (f(x+e) - f(x-e)) - (f(x+2e) - f(x-2e))) / 12e`. Truncation error is
/// `O(e^4)`, so a larger `e` can be used and rounding noise drops with it.
pub fn five_point_difference<F>(mut f: F, params: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            let mut at = |d: f64| {
                x[i] = orig + d;
                f(&x)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * eps), at(-eps), at(eps), at(2.0 * eps));
            x[i] = orig;
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
        })
        .collect()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Max over coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
///
/// `f` returns the scalar value and its analytic gradient; it must be
/// deterministic (freeze any RNG draws before calling).
pub fn finite_difference_check<F>(mut f: F, params: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    let numeric = central_difference(|p| f(p).0, params, eps);
    max_relative_error(&analytic, &numeric)
}

/// [`finite_difference_check`] against [`five_point_difference`].
pub fn five_point_check<F>(mut f: F, params: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    let numeric = five_point_difference(|p| f(p).0, params, eps);
    max_relative_error(&analytic, &numeric)
}
