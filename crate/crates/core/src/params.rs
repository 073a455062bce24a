//! Uniform access to every trainable tensor of a component.
//!
//! Gradients are stored in a value of the same type as the component they
//! belong to (see [`zeros_like`]), so optimizer state, checkpoints and
//! gradient checks can all walk parameters in one canonical order.

/// Implemented by every component holding trainable tensors.
pub trait Parameters {
    /// Calls `f(name, shape, data)` for each tensor in canonical order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    /// Mutable counterpart of [`Parameters::visit`], same order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_array<D: ndarray::Dimension>(
    a: &ndarray::Array<f64, D>,
    name: &str,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(name, a.shape(), a.as_slice().expect("parameters are contiguous"));
}

pub(crate) fn visit_array_mut<D: ndarray::Dimension>(
    a: &mut ndarray::Array<f64, D>,
    name: &str,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("parameters are contiguous"));
}

/// A copy of `p` with every parameter set to zero; used as a gradient buffer.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, _, data| data.fill(0.0));
    z
}

pub fn param_count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut total = 0;
    p.visit("", &mut |_, _, data| total += data.len());
    total
}

/// All parameters concatenated in canonical order.
pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, data| out.extend_from_slice(data));
    out
}

/// Inverse of [`flatten`].
pub fn unflatten<P: Parameters + ?Sized>(p: &mut P, flat: &[f64]) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, _, data| {
        data.copy_from_slice(&flat[offset..offset + data.len()]);
        offset += data.len();
    });
    assert_eq!(offset, flat.len(), "flat parameter vector has wrong length");
}

/// `(name, shape, len)` for each tensor.
pub fn layout<P: Parameters + ?Sized>(p: &P) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, shape, data| out.push((name.to_string(), shape.to_vec(), data.len())));
    out
}
