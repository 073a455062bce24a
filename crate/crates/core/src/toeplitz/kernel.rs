use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rustfft::num_complex::Complex;

use super::circulant::fill_first_column;
use super::{build_circulant, CirculantStrategy, RelPosCoefficients};
use crate::error::{Error, Result};
use crate::scalar::Real;

const TILE: usize = 32;

/// Writes `src[i, j]` to `dst[j * rows + i]`, tile by tile so that reads and
/// writes both stay within a few pages.
fn transpose_into<T: Real>(src: ArrayView2<'_, T>, dst: &mut [T]) {
    let (rows, cols) = src.dim();
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[j * rows + i] = src[[i, j]];
                }
            }
        }
    }
}

fn resized<T: Real>(v: &mut Vec<T>, len: usize) -> &mut [T] {
    v.resize(len, T::zero());
    &mut v[..len]
}

/// Inverse of [`transpose_into`].
fn transpose_from<T: Real>(src: &[T], mut dst: ndarray::ArrayViewMut2<'_, T>) {
    let (rows, cols) = dst.dim();
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[[i, j]] = src[j * rows + i];
                }
            }
        }
    }
}

/// Direct evaluation of `y[i] = sum_j t[i - j] * x[j]` for every channel.
pub fn naive_matvec<T: Real>(coeffs: &RelPosCoefficients<T>, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
    coeffs.check_input(&x)?;
    let n = coeffs.len();
    let mut y = Array2::zeros((n, coeffs.channels()));
    for ch in 0..coeffs.channels() {
        // r[m] = t[n - 1 - m], so y[i] = sum_j r[n - 1 - i + j] * x[j]
        let r: Vec<T> = coeffs.values().column(ch).iter().rev().copied().collect();
        let xc: Vec<T> = x.column(ch).to_vec();
        for i in 0..n {
            y[[i, ch]] = dot(&r[n - 1 - i..2 * n - 1 - i], &xc);
        }
    }
    Ok(y)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail = a4
        .remainder()
        .iter()
        .zip(b4.remainder())
        .fold(T::zero(), |s, (&p, &q)| s + p * q);
    for (p, q) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] = acc[l] + p[l] * q[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn naive_matvec_batch<T: Real>(coeffs: &RelPosCoefficients<T>, x: ArrayView3<'_, T>) -> Result<Array3<T>> {
    let mut y = Array3::zeros(x.raw_dim());
    for (b, item) in x.outer_iter().enumerate() {
        y.index_axis_mut(Axis(0), b).assign(&naive_matvec(coeffs, item)?);
    }
    Ok(y)
}

/// Spectra of a circulant embedding, ready to multiply many inputs.
#[derive(Debug, Clone)]
pub struct ToeplitzPlan<T: Real = f64> {
    n: usize,
    size: usize,
    spectra: Vec<Vec<Complex<T>>>,
}

impl<T: Real> ToeplitzPlan<T> {
    pub fn new(coeffs: &RelPosCoefficients<T>, strategy: CirculantStrategy) -> Result<Self> {
        let circ = build_circulant(coeffs, strategy)?;
        let size = circ.embed_size();
        let fft = T::plan(size, false);
        let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        let spectra = circ
            .first_column
            .columns()
            .into_iter()
            .map(|col| {
                let mut buf: Vec<Complex<T>> = col.iter().map(|&v| Complex::new(v, T::zero())).collect();
                fft.process_with_scratch(&mut buf, &mut scratch);
                buf
            })
            .collect();
        Ok(Self {
            n: coeffs.len(),
            size,
            spectra,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn embed_size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.spectra.len()
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.n || cols != self.channels() {
            return Err(Error::dim(format!(
                "input is [{rows}, {cols}], operator expects [{}, {}]",
                self.n,
                self.channels()
            )));
        }
        Ok(())
    }

    /// Product for a single `[n, d]` sequence.
    pub fn apply(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let out = self.apply_batch(x.insert_axis(Axis(0)))?;
        Ok(out.index_axis_move(Axis(0), 0))
    }

    /// Product for every item of a `[batch, n, d]` tensor.
    pub fn apply_batch(&self, x: ArrayView3<'_, T>) -> Result<Array3<T>> {
        let (_, rows, cols) = x.dim();
        self.check(rows, cols)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("input has non-finite entries".into()));
        }
        let fwd = T::plan(self.size, false);
        let inv = T::plan(self.size, true);
        let mut scratch =
            vec![Complex::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
        let mut buf = vec![Complex::default(); self.size];
        let scale = T::one() / T::from_usize(self.size).unwrap();
        let mut y = Array3::zeros(x.raw_dim());
        for (b, item) in x.outer_iter().enumerate() {
            for (ch, spectrum) in self.spectra.iter().enumerate() {
                buf.fill(Complex::default());
                for (slot, &v) in buf.iter_mut().zip(item.column(ch)) {
                    slot.re = v;
                }
                fwd.process_with_scratch(&mut buf, &mut scratch);
                for (z, s) in buf.iter_mut().zip(spectrum) {
                    *z = *z * *s;
                }
                inv.process_with_scratch(&mut buf, &mut scratch);
                for i in 0..self.n {
                    y[[b, i, ch]] = buf[i].re * scale;
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("FFT product overflowed".into()));
        }
        Ok(y)
    }
}

/// `O(n log n)` product through the circulant embedding chosen by `strategy`.
pub fn fft_matvec<T: Real>(
    coeffs: &RelPosCoefficients<T>,
    x: ArrayView2<'_, T>,
    strategy: CirculantStrategy,
) -> Result<Array2<T>> {
    coeffs.check_input(&x)?;
    Ok(fft_matvec_batch(coeffs, x.insert_axis(Axis(0)), strategy)?.index_axis_move(Axis(0), 0))
}

/// Batched product. One channel is processed at a time, so the working set
/// is a few transforms of the embedding size whatever the channel count.
pub fn fft_matvec_batch<T: Real>(
    coeffs: &RelPosCoefficients<T>,
    x: ArrayView3<'_, T>,
    strategy: CirculantStrategy,
) -> Result<Array3<T>> {
    let (batch, rows, cols) = x.dim();
    let n = coeffs.len();
    if rows != n || cols != coeffs.channels() {
        return Err(Error::dim(format!(
            "input is {:?}, operator expects [_, {n}, {}]",
            x.shape(),
            coeffs.channels()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("input has non-finite entries".into()));
    }
    let size = strategy.embed_size(n);
    let fwd = T::real_forward(size);
    let inv = T::real_inverse(size);
    let mut scratch = vec![Complex::default(); fwd.get_scratch_len().max(inv.get_scratch_len())];
    let mut column = vec![T::zero(); size];
    let mut signal = vec![T::zero(); size];
    let mut spectrum = fwd.make_output_vec();
    let mut buf = fwd.make_output_vec();
    let scale = T::one() / T::from_usize(size).unwrap();
    let fft_err = |e: realfft::FftError| Error::Numeric(format!("real FFT failed: {e}"));
    let mut y = Array3::zeros((batch, n, cols));
    T::with_workspace(|ws| -> Result<()> {
        // Channel-major copies, so every transform reads and writes contiguous memory.
        let taps = resized(&mut ws.taps, cols * (2 * n - 1));
        transpose_into(coeffs.values().view(), taps);
        let xs = resized(&mut ws.input, batch * cols * n);
        for (b, chunk) in xs.chunks_exact_mut(cols * n).enumerate() {
            transpose_into(x.index_axis(Axis(0), b), chunk);
        }
        let ys = resized(&mut ws.output, batch * cols * n);
        for (c, t) in taps.chunks_exact(2 * n - 1).enumerate() {
            fill_first_column(t, strategy, &mut column);
            fwd.process_with_scratch(&mut column, &mut spectrum, &mut scratch).map_err(fft_err)?;
            for b in 0..batch {
                let at = (b * cols + c) * n;
                signal[..n].copy_from_slice(&xs[at..at + n]);
                signal[n..].fill(T::zero());
                fwd.process_with_scratch(&mut signal, &mut buf, &mut scratch).map_err(fft_err)?;
                for (z, s) in buf.iter_mut().zip(&spectrum) {
                    *z = *z * *s;
                }
                // DC and Nyquist bins of a real signal are real; drop rounding residue.
                buf[0].im = T::zero();
                if size % 2 == 0 {
                    buf[size / 2].im = T::zero();
                }
                inv.process_with_scratch(&mut buf, &mut signal, &mut scratch).map_err(fft_err)?;
                for (o, &v) in ys[at..at + n].iter_mut().zip(&signal) {
                    *o = v * scale;
                }
            }
        }
        for (b, chunk) in ys.chunks_exact(cols * n).enumerate() {
            transpose_from(chunk, y.index_axis_mut(Axis(0), b));
        }
        Ok(())
    })?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("FFT product overflowed".into()));
    }
    Ok(y)
}

/// Gradients of `y = T x` given `dL/dy`.
///
/// Returns `(T^T g, dL/dt)` where `dL/dt[k] = sum_{i - j = k} g[i] x[j]`.
pub fn matvec_backward<T: Real>(
    coeffs: &RelPosCoefficients<T>,
    x: ArrayView2<'_, T>,
    grad_y: ArrayView2<'_, T>,
    strategy: CirculantStrategy,
) -> Result<(Array2<T>, RelPosCoefficients<T>)> {
    let (gx, gc) = matvec_backward_batch(
        coeffs,
        x.insert_axis(Axis(0)),
        grad_y.insert_axis(Axis(0)),
        strategy,
    )?;
    Ok((gx.index_axis_move(Axis(0), 0), gc))
}

/// Batched backward pass; coefficient gradients are summed over the batch.
pub fn matvec_backward_batch<T: Real>(
    coeffs: &RelPosCoefficients<T>,
    x: ArrayView3<'_, T>,
    grad_y: ArrayView3<'_, T>,
    strategy: CirculantStrategy,
) -> Result<(Array3<T>, RelPosCoefficients<T>)> {
    if x.shape() != grad_y.shape() {
        return Err(Error::dim(format!(
            "input {:?} and output gradient {:?} differ in shape",
            x.shape(),
            grad_y.shape()
        )));
    }
    let n = coeffs.len();
    let channels = coeffs.channels();
    if x.dim().1 != n || x.dim().2 != channels {
        return Err(Error::dim(format!(
            "input is {:?}, operator expects [_, {n}, {channels}]",
            x.shape()
        )));
    }

    let grad_x = fft_matvec_batch(&coeffs.reversed(), grad_y, strategy)?;

    // Cross-correlation of g and x per channel, accumulated in the frequency domain.
    let size = strategy.embed_size(n);
    let fwd = T::plan(size, false);
    let inv = T::plan(size, true);
    let mut scratch =
        vec![Complex::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
    let mut gbuf = vec![Complex::default(); size];
    let mut xbuf = vec![Complex::default(); size];
    let scale = T::one() / T::from_usize(size).unwrap();
    let mut grad_coeffs = RelPosCoefficients::zeros(n, channels);
    for ch in 0..channels {
        let mut acc = vec![Complex::<T>::default(); size];
        for (xi, gi) in x.outer_iter().zip(grad_y.outer_iter()) {
            gbuf.fill(Complex::default());
            xbuf.fill(Complex::default());
            for (slot, &v) in gbuf.iter_mut().zip(gi.column(ch)) {
                slot.re = v;
            }
            for (slot, &v) in xbuf.iter_mut().zip(xi.column(ch)) {
                slot.re = v;
            }
            fwd.process_with_scratch(&mut gbuf, &mut scratch);
            fwd.process_with_scratch(&mut xbuf, &mut scratch);
            for ((a, g), xv) in acc.iter_mut().zip(&gbuf).zip(&xbuf) {
                *a = *a + *g * xv.conj();
            }
        }
        inv.process_with_scratch(&mut acc, &mut scratch);
        let values = grad_coeffs.values_mut();
        for k in -(n as isize - 1)..n as isize {
            let slot = k.rem_euclid(size as isize) as usize;
            values[[(k + n as isize - 1) as usize, ch]] = acc[slot].re * scale;
        }
    }
    if grad_coeffs.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("coefficient gradient overflowed".into()));
    }
    Ok((grad_x, grad_coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{max_rel_err, random_array};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn three_term() -> RelPosCoefficients {
        RelPosCoefficients::new(2, array![[3.0], [1.0], [2.0]]).unwrap()
    }

    #[test]
    fn naive_two_by_two() {
        // y0 = t0*x0 + t-1*x1 = 1 + 3, y1 = t1*x0 + t0*x1 = 2 + 1
        let y = naive_matvec(&three_term(), array![[1.0], [1.0]].view()).unwrap();
        assert_eq!(y, array![[4.0], [3.0]]);
    }

    #[test]
    fn fft_two_by_two_matches() {
        for s in CirculantStrategy::ALL {
            let y = fft_matvec(&three_term(), array![[1.0], [1.0]].view(), s).unwrap();
            assert!((y[[0, 0]] - 4.0).abs() < 1e-12 && (y[[1, 0]] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_zero_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Array2<f64> = random_array(&mut rng, (64, 3));
        let id = RelPosCoefficients::identity(64, 3);
        assert_eq!(naive_matvec(&id, x.view()).unwrap(), x);
        for s in CirculantStrategy::ALL {
            let y = fft_matvec(&id, x.view(), s).unwrap();
            assert!(y.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
        let zero = RelPosCoefficients::zeros(64, 3);
        assert!(naive_matvec(&zero, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let c = three_term();
        assert!(matches!(
            naive_matvec(&c, Array2::zeros((3, 1)).view()),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            fft_matvec(&c, Array2::zeros((2, 2)).view(), CirculantStrategy::Paper2n),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            matvec_backward(&c, Array2::zeros((2, 1)).view(), Array2::zeros((3, 1)).view(), CirculantStrategy::PaddedPow2),
            Err(Error::Dimension(_))
        ));
        let bad = array![[f64::NAN], [1.0]];
        assert!(matches!(naive_matvec(&c, bad.view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn fft_matches_naive_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=128 {
            let d = 1 + n % 3;
            let c = RelPosCoefficients::new(n, random_array(&mut rng, (2 * n - 1, d))).unwrap();
            let x: Array2<f64> = random_array(&mut rng, (n, d));
            let reference = naive_matvec(&c, x.view()).unwrap();
            for s in CirculantStrategy::ALL {
                let fast = fft_matvec(&c, x.view(), s).unwrap();
                assert!(max_rel_err(&fast, &reference) <= 1e-9, "n={n} {s:?}");
            }
        }
    }

    #[test]
    fn single_precision_within_relaxed_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [1, 7, 64, 300] {
            let c = RelPosCoefficients::new(n, random_array(&mut rng, (2 * n - 1, 2))).unwrap();
            let x: Array2<f64> = random_array(&mut rng, (n, 2));
            let reference = naive_matvec(&c, x.view()).unwrap();
            let fast = fft_matvec(&c.cast::<f32>(), x.mapv(|v| v as f32).view(), CirculantStrategy::PaddedPow2)
                .unwrap()
                .mapv(f64::from);
            assert!(max_rel_err(&fast, &reference) <= f32::ORACLE_TOL, "n={n}");
        }
    }

    #[test]
    fn backward_two_by_two() {
        let x = array![[1.0], [1.0]];
        let g = array![[1.0], [0.0]];
        let (gx, gc) = matvec_backward(&three_term(), x.view(), g.view(), CirculantStrategy::Paper2n).unwrap();
        assert!((gx[[0, 0]] - 1.0).abs() < 1e-12 && (gx[[1, 0]] - 3.0).abs() < 1e-12);
        // dL/dt[k] = sum_{i-j=k} g_i x_j: only i = 0 contributes, j = 0 (k=0) and j = 1 (k=-1)
        let expected = [1.0, 1.0, 0.0];
        for (v, e) in gc.values().column(0).iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_zero_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = RelPosCoefficients::new(9, random_array(&mut rng, (17, 2))).unwrap();
        let x: Array2<f64> = random_array(&mut rng, (9, 2));
        let (gx, gc) = matvec_backward(&c, x.view(), Array2::zeros((9, 2)).view(), CirculantStrategy::PaddedPow2).unwrap();
        assert!(gx.iter().chain(gc.values().iter()).all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn batch_backward_sums_coefficient_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = RelPosCoefficients::new(5, random_array(&mut rng, (9, 2))).unwrap();
        let x: Array3<f64> = random_array(&mut rng, (3, 5, 2));
        let g: Array3<f64> = random_array(&mut rng, (3, 5, 2));
        let (_, batched) = matvec_backward_batch(&c, x.view(), g.view(), CirculantStrategy::Paper2n).unwrap();
        let mut summed = Array2::<f64>::zeros((9, 2));
        for b in 0..3 {
            let (_, one) = matvec_backward(
                &c,
                x.index_axis(Axis(0), b),
                g.index_axis(Axis(0), b),
                CirculantStrategy::Paper2n,
            )
            .unwrap();
            summed += one.values();
        }
        assert!(max_rel_err(batched.values(), &summed) < 1e-12);
    }
}
