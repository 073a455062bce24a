//! Error metrics, random fixtures and finite differences shared by the
//! oracle tests and the self-test report.

use ndarray::{Array, ArrayBase, Data, Dimension, ShapeBuilder};
use rand::Rng;

use crate::params::{flatten, layout, unflatten, Parameters};

/// `max |a - b| / max |b|`: error relative to the reference's scale.
///
/// Elementwise relative error is ill-conditioned wherever the reference
/// cancels to near zero, so the reference's largest magnitude is used as the
/// common scale. Two all-zero arrays have error zero.
pub fn max_rel_err<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> f64
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    assert_eq!(a.shape(), b.shape(), "shape mismatch in error metric");
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a
        .iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Uniform entries in `[-1, 1)`.
pub fn random_array<R, Sh, D>(rng: &mut R, shape: Sh) -> Array<f64, D>
where
    R: Rng + ?Sized,
    Sh: ShapeBuilder<Dim = D>,
    D: Dimension,
{
    Array::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

/// Central differences of `f` with respect to every entry of `params`.
///
/// `params` is restored to its original contents before returning.
pub fn central_differences(params: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + step;
        let plus = f(params);
        params[i] = orig - step;
        let minus = f(params);
        params[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// Per-tensor finite-difference check of `analytic`, the gradient of `loss`
/// at `params`. Returns `(tensor name, largest floored relative error)`.
pub fn gradient_errors<P: Parameters + Clone>(
    params: &P,
    analytic: &P,
    step: f64,
    floor: f64,
    loss: impl Fn(&P) -> f64,
) -> Vec<(String, f64)> {
    let mut flat = flatten(params);
    let numeric = central_differences(&mut flat, step, |v| {
        let mut probe = params.clone();
        unflatten(&mut probe, v);
        loss(&probe)
    });
    let exact = flatten(analytic);
    let mut offset = 0;
    layout(params)
        .into_iter()
        .map(|(name, _, len)| {
            let err = max_rel_err_floor(&exact[offset..offset + len], &numeric[offset..offset + len], floor);
            offset += len;
            (name, err)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relative_error_uses_reference_scale() {
        let a = array![1.0, 2.0, 3.0];
        let b = array![1.0, 2.0, 4.0];
        assert!((max_rel_err(&a, &b) - 0.25).abs() < 1e-15);
        assert_eq!(max_rel_err(&array![0.0], &array![0.0]), 0.0);
    }

    #[test]
    fn central_differences_of_quadratic() {
        let mut p = vec![1.0, -2.0];
        let g = central_differences(&mut p, 1e-5, |q| q[0] * q[0] + 3.0 * q[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
        assert_eq!(p, vec![1.0, -2.0]);
    }
}
