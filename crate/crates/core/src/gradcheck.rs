//! Central finite differences in double precision, used as the independent
//! oracle for every hand-written backward pass.

/// Derivative of `f` along coordinate `idx` of `x` by central differences.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], idx: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    probe[idx] = x[idx] + h;
    let up = f(&probe);
    probe[idx] = x[idx] - h;
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Symmetric relative error with a small absolute floor.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over the coordinates in `indices`.
pub fn max_rel_err(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    h: f64,
) -> f64 {
    indices
        .into_iter()
        .map(|i| rel_err(analytic[i], central_diff(&mut f, x, i, h)))
        .fold(0.0, f64::max)
}
