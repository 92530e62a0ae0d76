//! Central finite differences for checking analytic gradients.

use super::{ParamId, ParamStore};

/// Central difference of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Central difference of a loss w.r.t. every element of one parameter.
pub fn param_difference(
    store: &ParamStore,
    id: ParamId,
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    let mut probe = store.clone();
    let n = store.get(id).len();
    (0..n)
        .map(|i| {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
