use super::Scalar;

/// Largest relative disagreement between `analytic` and central differences
/// of `f` around `params`.
///
/// Coordinate `i` is perturbed by `h * max(1, |p_i|)`. The relative error of
/// a coordinate is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check<S, F>(mut f: F, params: &[S], analytic: &[S], h: f64) -> f64
where
    S: Scalar,
    F: FnMut(&[S]) -> S,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        let step = h * orig.as_f64().abs().max(1.0);
        p[i] = S::lit(orig.as_f64() + step);
        let plus = f(&p).as_f64();
        p[i] = S::lit(orig.as_f64() - step);
        let minus = f(&p).as_f64();
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i].as_f64(), numeric));
    }
    worst
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}
