//! Finite-difference oracles used by unit and acceptance tests.
//!
//! The central-difference gradient is computed at double precision and is
//! deliberately independent of any backward pass in this crate.

use ndarray::{Array2, Array3, ArrayViewD};

/// Central finite differences of a scalar function of a 2D array.
pub fn central_difference_grad<Fun>(mut f: Fun, x: &Array2<f64>, step: f64) -> Array2<f64>
where
    Fun: FnMut(&Array2<f64>) -> f64,
{
    let mut grad = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let plus = f(&probe);
        probe[idx] = orig - step;
        let minus = f(&probe);
        probe[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Central finite differences of a scalar function of a 3D array.
pub fn central_difference_grad_3d<Fun>(mut f: Fun, x: &Array3<f64>, step: f64) -> Array3<f64>
where
    Fun: FnMut(&Array3<f64>) -> f64,
{
    let mut grad = Array3::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let plus = f(&probe);
        probe[idx] = orig - step;
        let minus = f(&probe);
        probe[idx] = orig;
        grad[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Maximum elementwise relative error `|a-b| / max(|a|, |b|)`. Entries where
/// both magnitudes are below `1e-8` count as exact agreement.
pub fn max_rel_error(a: &ArrayViewD<'_, f64>, b: &ArrayViewD<'_, f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel error on mismatched shapes");
    let mut worst = 0.0_f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs());
        if denom < 1e-8 {
            continue;
        }
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
