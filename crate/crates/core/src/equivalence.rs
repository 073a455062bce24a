//! Convolutions, linear state-space models and ALiBi biases written as
//! Toeplitz operators, with direct oracles for each.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::check::random_array;
use crate::error::{Error, Result};
use crate::toeplitz::{fft_matvec, CirculantStrategy, RelPosCoefficients};

/// Taps `h` of a one-dimensional convolution `y = h * x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    taps: Array1<f64>,
}

impl ConvKernel {
    pub fn new(taps: Array1<f64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::dim("convolution kernel needs at least one tap"));
        }
        if taps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("convolution kernel has non-finite taps".into()));
        }
        Ok(Self { taps })
    }

    pub fn taps(&self) -> ArrayView1<'_, f64> {
        self.taps.view()
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Toeplitz form of a full convolution of a length-`n` signal.
///
/// The operator has size `n + m - 1` with `t_k = h_k` for `0 <= k < m` and
/// zeros elsewhere; it acts on the zero-padded input from [`pad_input`].
pub fn conv_to_toeplitz(kernel: &ConvKernel, n: usize) -> Result<RelPosCoefficients> {
    if n == 0 {
        return Err(Error::dim("signal length must be positive"));
    }
    let m = kernel.len();
    RelPosCoefficients::from_fn(n + m - 1, 1, |k, _| {
        if k >= 0 && (k as usize) < m {
            kernel.taps[k as usize]
        } else {
            0.0
        }
    })
}

/// `z = [x; 0_{m-1}]`.
pub fn pad_input(x: ArrayView1<'_, f64>, m: usize) -> Array1<f64> {
    let mut z = Array1::zeros(x.len() + m - 1);
    z.slice_mut(ndarray::s![..x.len()]).assign(&x);
    z
}

/// Full convolution through the Toeplitz operator and the FFT kernel.
pub fn conv_via_toeplitz(kernel: &ConvKernel, x: ArrayView1<'_, f64>, strategy: CirculantStrategy) -> Result<Array1<f64>> {
    let coeffs = conv_to_toeplitz(kernel, x.len())?;
    let z = pad_input(x, kernel.len()).insert_axis(Axis(1));
    Ok(fft_matvec(&coeffs, z.view(), strategy)?.remove_axis(Axis(1)))
}

/// `y_i = sum_j h_{i-j} x_j` for `i < n + m - 1`, by direct summation.
pub fn direct_convolution(h: ArrayView1<'_, f64>, x: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut y = Array1::zeros(x.len() + h.len() - 1);
    for (i, hi) in h.iter().enumerate() {
        for (j, xj) in x.iter().enumerate() {
            y[i + j] += hi * xj;
        }
    }
    y
}

/// `u_i = A u_{i-1} + B x_i`, `y_i = C u_i`, single input and output.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceParams {
    /// `[h, h]`
    pub a: Array2<f64>,
    /// `[h, 1]`
    pub b: Array2<f64>,
    /// `[1, h]`
    pub c: Array2<f64>,
}

impl StateSpaceParams {
    pub fn new(a: Array2<f64>, b: Array2<f64>, c: Array2<f64>) -> Result<Self> {
        let h = a.nrows();
        if h == 0 || a.ncols() != h || b.dim() != (h, 1) || c.dim() != (1, h) {
            return Err(Error::dim(format!(
                "state-space shapes A {:?}, B {:?}, C {:?} are inconsistent",
                a.shape(),
                b.shape(),
                c.shape()
            )));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("state-space parameters are not finite".into()));
        }
        Ok(Self { a, b, c })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Random system with `A` rescaled to spectral radius at most `radius`.
    pub fn random_stable<R: Rng + ?Sized>(rng: &mut R, h: usize, radius: f64) -> Result<Self> {
        let mut a: Array2<f64> = random_array(rng, (h, h));
        let rho = spectral_radius(&a);
        if rho > radius {
            a *= radius / rho;
        }
        Self::new(a, random_array(rng, (h, 1)), random_array(rng, (1, h)))
    }
}

/// Estimate of the spectral radius from the growth rate of `A^k v`.
pub fn spectral_radius(a: &Array2<f64>) -> f64 {
    const ITERS: usize = 200;
    let h = a.nrows();
    let mut v = Array1::from_shape_fn(h, |i| 1.0 + 0.37 * i as f64);
    v /= v.dot(&v).sqrt();
    let mut log_growth = 0.0;
    // The first half only settles the direction; growth is measured over the second.
    for it in 0..2 * ITERS {
        v = a.dot(&v);
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        if it >= ITERS {
            log_growth += norm.ln();
        }
        v /= norm;
    }
    (log_growth / ITERS as f64).exp()
}

/// Impulse response `k_j = C A^j B` for `j < n`, by repeated products with `A`.
pub fn ssm_kernel(params: &StateSpaceParams, n: usize) -> Result<Array1<f64>> {
    if n == 0 {
        return Err(Error::dim("sequence length must be positive"));
    }
    let c = params.c.row(0);
    let mut v = params.b.column(0).to_owned();
    let mut k = Array1::zeros(n);
    for (j, kj) in k.iter_mut().enumerate() {
        *kj = c.dot(&v);
        if !kj.is_finite() {
            return Err(Error::Numeric(format!(
                "state-space kernel overflowed at step {j}; spectral radius of A is about {:.4}, needs to be below 1",
                spectral_radius(&params.a)
            )));
        }
        v = params.a.dot(&v);
    }
    Ok(k)
}

/// Lower-triangular Toeplitz coefficients `t_k = k_k` for `k >= 0`, zero otherwise.
pub fn ssm_to_toeplitz(params: &StateSpaceParams, n: usize) -> Result<RelPosCoefficients> {
    let k = ssm_kernel(params, n)?;
    RelPosCoefficients::from_fn(n, 1, |off, _| if off >= 0 { k[off as usize] } else { 0.0 })
}

/// Output sequence through the Toeplitz operator and the FFT kernel.
pub fn ssm_via_toeplitz(params: &StateSpaceParams, x: ArrayView1<'_, f64>, strategy: CirculantStrategy) -> Result<Array1<f64>> {
    let coeffs = ssm_to_toeplitz(params, x.len())?;
    let x = x.to_owned().insert_axis(Axis(1));
    Ok(fft_matvec(&coeffs, x.view(), strategy)?.remove_axis(Axis(1)))
}

/// Step-by-step recurrence from the zero state `u_{-1} = 0`.
pub fn ssm_recurrence(params: &StateSpaceParams, x: ArrayView1<'_, f64>) -> Array1<f64> {
    let b = params.b.column(0);
    let c = params.c.row(0);
    let mut u = Array1::zeros(params.state_dim());
    x.iter()
        .map(|&xi| {
            u = params.a.dot(&u) + &b * xi;
            c.dot(&u)
        })
        .collect()
}

/// ALiBi's attention weight `exp(s + m |k|)` for score `s`, slope `m` and offset `k`.
pub fn alibi_weight(s: f64, m: f64, offset: isize) -> f64 {
    (s + m * offset.unsigned_abs() as f64).exp()
}

/// The same weight factored as `exp(s) * lambda^|k|`.
pub fn decayed_weight(s: f64, lambda: f64, offset: isize) -> f64 {
    s.exp() * lambda.powi(offset.unsigned_abs() as i32)
}

/// Decay rate `lambda = exp(m)` equivalent to a non-positive ALiBi slope.
pub fn alibi_decay(m: f64) -> Result<f64> {
    if !(m <= 0.0) {
        return Err(Error::Range(format!("ALiBi slope {m} must be non-positive")));
    }
    Ok(m.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::max_rel_err;
    use crate::nn::Activation;
    use crate::rpe::{InputMode, RpeConfig, RpeNet};
    use crate::tno::ToeplitzOperator;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn delta_kernel_is_identity_on_padded_input() {
        let k = ConvKernel::new(array![1.0]).unwrap();
        let x = array![3.0, -1.0, 2.0];
        assert_eq!(conv_to_toeplitz(&k, 3).unwrap().to_dense(0), Array2::<f64>::eye(3));
        let y = conv_via_toeplitz(&k, x.view(), CirculantStrategy::Paper2n).unwrap();
        assert!(max_rel_err(&y, &x) < 1e-15);
    }

    #[test]
    fn two_tap_example() {
        let k = ConvKernel::new(array![1.0, 2.0]).unwrap();
        let x = array![1.0, 1.0, 1.0];
        assert_eq!(direct_convolution(k.taps(), x.view()), array![1.0, 3.0, 3.0, 2.0]);
        for s in CirculantStrategy::ALL {
            let y = conv_via_toeplitz(&k, x.view(), s).unwrap();
            assert!(max_rel_err(&y, &array![1.0, 3.0, 3.0, 2.0]) < 1e-15);
        }
    }

    #[test]
    fn random_convolutions_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let m = rng.random_range(1..=8);
            let n = rng.random_range(1..=64);
            let k = ConvKernel::new(random_array(&mut rng, m)).unwrap();
            let x: Array1<f64> = random_array(&mut rng, n);
            let expected = direct_convolution(k.taps(), x.view());
            for s in CirculantStrategy::ALL {
                let y = conv_via_toeplitz(&k, x.view(), s).unwrap();
                assert!(max_rel_err(&y, &expected) < 1e-12);
            }
        }
    }

    #[test]
    fn conv_kernel_rejects_empty() {
        assert!(ConvKernel::new(Array1::zeros(0)).is_err());
        assert!(conv_to_toeplitz(&ConvKernel::new(array![1.0]).unwrap(), 0).is_err());
    }

    fn scalar(a: f64) -> StateSpaceParams {
        StateSpaceParams::new(array![[a]], array![[1.0]], array![[1.0]]).unwrap()
    }

    #[test]
    fn scalar_kernel() {
        assert_eq!(ssm_kernel(&scalar(0.5), 4).unwrap(), array![1.0, 0.5, 0.25, 0.125]);
        let y = ssm_via_toeplitz(&scalar(0.5), array![1.0, 0.0, 0.0].view(), CirculantStrategy::PaddedPow2).unwrap();
        assert!(max_rel_err(&y, &array![1.0, 0.5, 0.25]) < 1e-15);
    }

    #[test]
    fn zero_output_map_gives_zero_kernel() {
        let p = StateSpaceParams::new(array![[0.3, 0.1], [0.0, 0.2]], array![[1.0], [2.0]], array![[0.0, 0.0]]).unwrap();
        assert!(ssm_kernel(&p, 8).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_is_impulse_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = StateSpaceParams::random_stable(&mut rng, 3, 0.9).unwrap();
        let mut e0 = Array1::zeros(16);
        e0[0] = 1.0;
        let k = ssm_kernel(&p, 16).unwrap();
        assert!(max_rel_err(&k, &ssm_recurrence(&p, e0.view())) < 1e-14);
    }

    #[test]
    fn random_systems_match_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let h = rng.random_range(1..=4);
            let n = rng.random_range(1..=128);
            let p = StateSpaceParams::random_stable(&mut rng, h, 0.9).unwrap();
            let x: Array1<f64> = random_array(&mut rng, n);
            let expected = ssm_recurrence(&p, x.view());
            for s in CirculantStrategy::ALL {
                assert!(max_rel_err(&ssm_via_toeplitz(&p, x.view(), s).unwrap(), &expected) < 1e-10);
            }
        }
    }

    #[test]
    fn spectral_radius_estimates() {
        assert!((spectral_radius(&array![[0.5, 0.0], [0.0, -2.0]]) - 2.0).abs() < 1e-6);
        // Rotation by 90 degrees scaled by 0.7: complex eigenvalues of modulus 0.7.
        assert!((spectral_radius(&array![[0.0, -0.7], [0.7, 0.0]]) - 0.7).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = StateSpaceParams::random_stable(&mut rng, 4, 0.9).unwrap();
        assert!(spectral_radius(&p.a) <= 0.9 + 1e-2);
    }

    #[test]
    fn unstable_system_reports_radius() {
        let err = ssm_kernel(&scalar(1e200), 4).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("spectral radius")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_errors() {
        assert!(StateSpaceParams::new(array![[1.0]], array![[1.0], [1.0]], array![[1.0]]).is_err());
    }

    #[test]
    fn alibi_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s = rng.random_range(-3.0..3.0);
            let m = rng.random_range(-2.0..=0.0);
            let lambda = alibi_decay(m).unwrap();
            for k in -63..=63isize {
                let a = alibi_weight(s, m, k);
                let b = decayed_weight(s, lambda, k);
                assert!((a - b).abs() <= 1e-12 * a.abs());
            }
        }
        assert!(alibi_decay(0.1).is_err());
        assert_eq!(alibi_decay(0.0).unwrap(), 1.0);
    }

    #[test]
    fn constant_rpe_with_decay_is_alibi() {
        let (s, m) = (0.4f64, -0.3);
        let config = RpeConfig {
            layers: 2,
            hidden_dim: 3,
            out_dim: 1,
            activation: Activation::Relu,
            input_mode: InputMode::RawInteger,
        };
        let mut rpe = RpeNet::zeros(config).unwrap();
        rpe.layers[1].bias = Some(array![s.exp()]);
        let op = ToeplitzOperator::new(rpe, alibi_decay(m).unwrap(), false).unwrap();
        let coeffs = op.effective_coeffs(64).unwrap();
        for k in -63..=63isize {
            let a = alibi_weight(s, m, k);
            assert!((coeffs.get(k, 0) - a).abs() <= 1e-12 * a);
        }
    }
}
