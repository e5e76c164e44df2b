use super::tensor::{ParamId, ParamStore};

/// Central difference `(f(x+eps) - f(x-eps)) / 2eps` of a scalar function.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Central-difference estimate of `∂f/∂θ` for element `elem` of parameter
/// `id`. The parameter is restored bit-exactly before returning.
pub fn finite_diff_gradient<F>(store: &mut ParamStore, id: ParamId, elem: usize, eps: f64, mut f: F) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let original = store.get(id).data[elem];
    store.get_mut(id).data[elem] = original + eps;
    let plus = f(store);
    store.get_mut(id).data[elem] = original - eps;
    let minus = f(store);
    store.get_mut(id).data[elem] = original;
    (plus - minus) / (2.0 * eps)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps the measure meaningful for gradients that are zero up to
/// round-off; pass `0.0` for a plain relative error.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}
