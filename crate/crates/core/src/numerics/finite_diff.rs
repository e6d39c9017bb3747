//! Central finite differences, the oracle for [`Tape::backward`](super::Tape::backward).

use super::matrix::Matrix;
use super::tape::{GradientMap, ParamSet};
use crate::scalar::Scalar;

/// Central differences `(f(p + eps e) - f(p - eps e)) / (2 eps)` for every
/// coordinate of every tensor in `params`.
pub fn finite_difference_gradient<T, F>(f: F, params: &ParamSet<T>, eps: T) -> GradientMap<T>
where
    T: Scalar,
    F: Fn(&ParamSet<T>) -> T,
{
    assert!(eps > T::zero(), "finite-difference step must be positive");
    let mut probe = params.clone();
    let mut out = GradientMap::new();
    let two_eps = T::lit(2.0) * eps;
    for (id, value) in params {
        let mut grad = Matrix::zeros(value.rows(), value.cols());
        for k in 0..value.len() {
            let original = value.as_slice()[k];
            probe.get_mut(id).expect("probe mirrors params").as_mut_slice()[k] = original + eps;
            let up = f(&probe);
            probe.get_mut(id).expect("probe mirrors params").as_mut_slice()[k] = original - eps;
            let down = f(&probe);
            probe.get_mut(id).expect("probe mirrors params").as_mut_slice()[k] = original;
            grad.as_mut_slice()[k] = (up - down) / two_eps;
        }
        out.insert(id.clone(), grad);
    }
    out
}

/// Relative error of one gradient tensor against a reference:
/// `max|a - b| / max(max|a|, max|b|)`, and `0` when both are zero.
pub fn relative_error<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    let diff = a.max_abs_diff(b).map(|d| d.as_f64()).unwrap_or(f64::INFINITY);
    let scale = a.max_abs().as_f64().max(b.max_abs().as_f64());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Worst [`relative_error`] across all tensors; tensors missing on either
/// side count as infinite error.
pub fn max_relative_error<T: Scalar>(a: &GradientMap<T>, b: &GradientMap<T>) -> f64 {
    let mut worst: f64 = 0.0;
    for (id, ga) in a {
        match b.get(id) {
            Some(gb) => worst = worst.max(relative_error(ga, gb)),
            None => return f64::INFINITY,
        }
    }
    if b.keys().any(|k| !a.contains_key(k)) {
        return f64::INFINITY;
    }
    worst
}
