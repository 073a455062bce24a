//! Causal products whose output at position `i` is a function of `x[..=i]`
//! alone, down to the last bit.
//!
//! A single FFT over the whole sequence spreads rounding error from every
//! input into every output, so editing a future token perturbs past outputs
//! in the last ulp. Here the product is split over a power-of-two aligned
//! tree: each block `[l, l + w)` adds the contribution of its left half to
//! its right half with one size-`w` FFT that only ever sees left-half inputs,
//! and leaves of [`LEAF`] positions are summed directly. The arithmetic that
//! reaches output `i` therefore never touches `x[i + 1..]`, and because the
//! tree for length `2N` contains the tree for `N` as its left subtree, shared
//! prefixes agree bit-for-bit across sequence lengths too.
//!
//! Cost is `O(n log^2 n)`.

use std::collections::HashMap;

use ndarray::{Array3, ArrayView3, ArrayViewMut1, Axis};
use rustfft::num_complex::Complex;

use super::RelPosCoefficients;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Block width below which outputs are summed directly.
pub const LEAF: usize = 16;

struct Tree<'a, T: Real> {
    /// `t[0], t[1], ...` per channel, zero past the table.
    taps: &'a RelPosCoefficients<T>,
    channel: usize,
    /// Spectrum of `t[0..w)` for each block width `w > LEAF`.
    spectra: &'a HashMap<usize, Vec<Vec<Complex<T>>>>,
    n: usize,
}

impl<T: Real> Tree<'_, T> {
    fn tap(&self, q: usize) -> T {
        if q < self.taps.len() {
            self.taps.get(q as isize, self.channel)
        } else {
            T::zero()
        }
    }

    fn solve(&self, x: &[T], y: &mut ArrayViewMut1<'_, T>, l: usize, w: usize) {
        if l >= self.n {
            return;
        }
        if w <= LEAF {
            for i in l..(l + w).min(self.n) {
                let mut acc = T::zero();
                for j in l..=i {
                    acc = acc + self.tap(i - j) * x[j];
                }
                y[i] = y[i] + acc;
            }
            return;
        }
        let h = w / 2;
        self.solve(x, y, l, h);
        if l + h < self.n {
            let fwd = T::plan(w, false);
            let inv = T::plan(w, true);
            let mut scratch =
                vec![Complex::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
            let mut buf = vec![Complex::<T>::default(); w];
            for p in 0..h.min(self.n - l) {
                buf[p].re = x[l + p];
            }
            fwd.process_with_scratch(&mut buf, &mut scratch);
            for (z, s) in buf.iter_mut().zip(&self.spectra[&w][self.channel]) {
                *z = *z * *s;
            }
            inv.process_with_scratch(&mut buf, &mut scratch);
            let scale = T::one() / T::from_usize(w).unwrap();
            for s in h..w {
                let i = l + s;
                if i >= self.n {
                    break;
                }
                y[i] = y[i] + buf[s].re * scale;
            }
        }
        self.solve(x, y, l + h, h);
    }
}

/// Lower-triangular product `y[i] = sum_{j <= i} t[i - j] x[j]` for `[batch, n, d]`.
///
/// Only the non-negative offsets of `coeffs` are read; the table may be
/// longer than `n` (offsets past the table count as zero). Every output row
/// is bit-identical under edits to later input rows.
pub fn causal_matvec_batch<T: Real>(coeffs: &RelPosCoefficients<T>, x: ArrayView3<'_, T>) -> Result<Array3<T>> {
    let (_, n, channels) = x.dim();
    if n == 0 || channels != coeffs.channels() {
        return Err(Error::dim(format!(
            "input is {:?}, operator has {} channels",
            x.shape(),
            coeffs.channels()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input has non-finite entries".into()));
    }
    let size = n.next_power_of_two();

    let mut spectra: HashMap<usize, Vec<Vec<Complex<T>>>> = HashMap::new();
    let mut w = size;
    while w > LEAF {
        let fwd = T::plan(w, false);
        let mut scratch = vec![Complex::default(); fwd.get_inplace_scratch_len()];
        let per_channel = (0..channels)
            .map(|ch| {
                let mut buf: Vec<Complex<T>> = (0..w)
                    .map(|q| {
                        let t = if q < coeffs.len() { coeffs.get(q as isize, ch) } else { T::zero() };
                        Complex::new(t, T::zero())
                    })
                    .collect();
                fwd.process_with_scratch(&mut buf, &mut scratch);
                buf
            })
            .collect();
        spectra.insert(w, per_channel);
        w /= 2;
    }

    let mut y = Array3::zeros(x.raw_dim());
    let mut column = vec![T::zero(); n];
    for (b, item) in x.outer_iter().enumerate() {
        for ch in 0..channels {
            column.iter_mut().zip(item.column(ch)).for_each(|(c, &v)| *c = v);
            let tree = Tree {
                taps: coeffs,
                channel: ch,
                spectra: &spectra,
                n,
            };
            let mut out = y.index_axis_mut(Axis(0), b);
            let mut out_col = out.column_mut(ch);
            tree.solve(&column, &mut out_col, 0, size);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("causal product overflowed".into()));
    }
    Ok(y)
}
