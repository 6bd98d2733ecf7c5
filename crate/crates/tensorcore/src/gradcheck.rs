//! Central finite differences for checking analytic gradients.

/// Symmetric relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference estimate of `df/dx_i` for each requested coordinate.
pub fn central_diff<F>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between an analytic gradient and central
/// differences over `coords`.
pub fn max_relative_error<F>(f: F, x: &[f64], analytic: &[f64], coords: &[usize], h: f64, floor: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let numeric = central_diff(f, x, coords, h);
    coords
        .iter()
        .zip(numeric)
        .map(|(&i, n)| relative_error(analytic[i], n, floor))
        .fold(0.0, f64::max)
}
