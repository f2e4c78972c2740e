//! Central finite-difference utilities shared by gradient-check tests.

use crate::graph::Arr;

/// Central-difference gradient of `f` with respect to `x0`, one coordinate
/// at a time.
pub fn central_diff<F>(mut f: F, x0: &Arr, eps: f64) -> Arr
where
    F: FnMut(&Arr) -> f64,
{
    let mut grad = Arr::zeros(x0.raw_dim());
    let mut x = x0.clone();
    let indices: Vec<ndarray::IxDyn> = x0.indexed_iter().map(|(i, _)| i).collect();
    for idx in indices {
        let orig = x[idx.clone()];
        x[idx.clone()] = orig + eps;
        let fp = f(&x);
        x[idx.clone()] = orig - eps;
        let fm = f(&x);
        x[idx.clone()] = orig;
        grad[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Maximum relative error between analytic and numeric gradients. The
/// denominator is floored to keep near-zero entries from dominating.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
