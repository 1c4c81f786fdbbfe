//! Finite-difference helpers for gradient verification.

use super::{ParamId, ParamStore, Tensor};

const NORM_FLOOR: f64 = 1e-6;

/// Relative error between two gradient buffers: `|a - b| / max(|a|, |b|, 1e-6)`
/// in the Euclidean norm. The floor keeps exactly-zero analytic gradients
/// (a bias under a shift-invariant loss, say) from comparing against pure
/// finite-difference roundoff.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    diff / scale.max(NORM_FLOOR)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Central-difference gradient of a scalar function of the whole store with
/// respect to one parameter.
pub fn numeric_param_grad(
    store: &mut ParamStore,
    id: ParamId,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    let n = store.get(id).numel();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let orig = store.get(id).data[i];
        store.get_mut(id).data[i] = orig + h;
        let plus = f(store);
        store.get_mut(id).data[i] = orig - h;
        let minus = f(store);
        store.get_mut(id).data[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_is_scale_free() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e1 = rel_error(&[1.0, 0.0], &[1.001, 0.0]);
        let e2 = rel_error(&[1000.0, 0.0], &[1001.0, 0.0]);
        assert!((e1 - e2).abs() < 1e-12);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn numeric_grad_of_square() {
        let x = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let g = numeric_grad(&x, 1e-6, |t| t.data.iter().map(|v| v * v).sum());
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] + 4.0).abs() < 1e-8);
    }
}
