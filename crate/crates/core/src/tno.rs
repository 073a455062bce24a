//! Toeplitz neural operator: RPE coefficients, exponential decay and causal
//! masking applied per channel through the FFT kernel.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::params::{join, visit_array, visit_array_mut, Parameters};
use crate::rpe::RpeNet;
use crate::scalar::Precision;
use crate::toeplitz::{causal_matvec_batch, fft_matvec_batch, matvec_backward_batch, CirculantStrategy, RelPosCoefficients};

#[derive(Debug)]
pub struct ToeplitzOperator {
    rpe: RpeNet,
    /// One entry, kept as an array so a learnable rate is an ordinary parameter.
    decay: Array1<f64>,
    learnable_decay: bool,
    causal: bool,
    strategy: CirculantStrategy,
    precision: Precision,
    // Effective coefficient tables by sequence length; cleared on every
    // mutable access to parameters.
    cache: Mutex<HashMap<usize, Arc<RelPosCoefficients>>>,
}

impl Clone for ToeplitzOperator {
    fn clone(&self) -> Self {
        Self {
            rpe: self.rpe.clone(),
            decay: self.decay.clone(),
            learnable_decay: self.learnable_decay,
            causal: self.causal,
            strategy: self.strategy,
            precision: self.precision,
            cache: Mutex::default(),
        }
    }
}

impl PartialEq for ToeplitzOperator {
    fn eq(&self, other: &Self) -> bool {
        self.rpe == other.rpe
            && self.decay == other.decay
            && self.learnable_decay == other.learnable_decay
            && self.causal == other.causal
            && self.strategy == other.strategy
            && self.precision == other.precision
    }
}

impl ToeplitzOperator {
    pub fn new(rpe: RpeNet, decay: f64, causal: bool) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self {
            rpe,
            decay: Array1::from_elem(1, decay),
            learnable_decay: false,
            causal,
            strategy: CirculantStrategy::default(),
            precision: Precision::default(),
            cache: Mutex::default(),
        })
    }

    pub fn with_strategy(mut self, strategy: CirculantStrategy) -> Self {
        self.strategy = strategy;
        self.invalidate();
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_learnable_decay(mut self, learnable: bool) -> Self {
        self.learnable_decay = learnable;
        self
    }

    pub fn rpe(&self) -> &RpeNet {
        &self.rpe
    }

    pub fn rpe_mut(&mut self) -> &mut RpeNet {
        self.invalidate();
        &mut self.rpe
    }

    pub fn decay(&self) -> f64 {
        self.decay[0]
    }

    pub fn set_decay(&mut self, decay: f64) -> Result<()> {
        check_decay(decay)?;
        self.decay[0] = decay;
        self.invalidate();
        Ok(())
    }

    /// Pulls a learnable rate back into `[0, 1]` after an optimizer update.
    pub fn clamp_decay(&mut self) {
        self.decay[0] = self.decay[0].clamp(0.0, 1.0);
        self.invalidate();
    }

    pub fn learnable_decay(&self) -> bool {
        self.learnable_decay
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    pub fn strategy(&self) -> CirculantStrategy {
        self.strategy
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn channels(&self) -> usize {
        self.rpe.config.out_dim
    }

    fn invalidate(&self) {
        self.cache.lock().expect("coefficient cache poisoned").clear();
    }

    /// Applies decay and the causal mask to a raw coefficient table.
    pub fn apply_bias(&self, raw: &RelPosCoefficients) -> RelPosCoefficients {
        let mut out = raw.clone();
        let decay = self.decay();
        let n = raw.len();
        for (row, mut values) in out.values_mut().outer_iter_mut().enumerate() {
            let k = row as isize - (n as isize - 1);
            if self.causal && k < 0 {
                values.fill(0.0);
            } else {
                // powi(0) is 1, so a zero rate leaves the diagonal intact
                values *= decay.powi(k.unsigned_abs() as i32);
            }
        }
        out
    }

    /// Decayed, masked coefficients `lambda^|k| * rpe(k)`, cached per length.
    pub fn effective_coeffs(&self, n: usize) -> Result<Arc<RelPosCoefficients>> {
        if let Some(hit) = self.cache.lock().expect("coefficient cache poisoned").get(&n) {
            return Ok(hit.clone());
        }
        let coeffs = Arc::new(self.apply_bias(&self.rpe.forward(n)?));
        self.cache
            .lock()
            .expect("coefficient cache poisoned")
            .insert(n, coeffs.clone());
        Ok(coeffs)
    }

    /// Coefficients with the RPE replaced by a constant one: the pure decay envelope.
    pub fn unit_rpe_coeffs(&self, n: usize) -> Result<RelPosCoefficients> {
        let ones = RelPosCoefficients::from_fn(n, self.channels(), |_, _| 1.0)?;
        Ok(self.apply_bias(&ones))
    }

    fn check_input(&self, x: &ArrayView3<'_, f64>) -> Result<()> {
        if x.dim().2 != self.channels() {
            return Err(Error::dim(format!(
                "input has {} channels, operator has {}",
                x.dim().2,
                self.channels()
            )));
        }
        if x.dim().1 == 0 {
            return Err(Error::dim("sequence length must be positive"));
        }
        Ok(())
    }

    /// `y = T x` for every batch item and channel of `[batch, n, d]`.
    ///
    /// Bidirectional operators use the circulant FFT product; causal ones use
    /// the prefix-stable causal product so that earlier outputs are
    /// bit-identical whatever follows them.
    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        self.check_input(&x)?;
        let n = x.dim().1;
        if self.causal {
            // Table sized to the power-of-two tree so every length sees the same taps.
            let coeffs = self.effective_coeffs(n.next_power_of_two())?;
            return match self.precision {
                Precision::F64 => causal_matvec_batch(&coeffs, x),
                Precision::F32 => {
                    let y = causal_matvec_batch(&coeffs.cast::<f32>(), x.mapv(|v| v as f32).view())?;
                    Ok(y.mapv(f64::from))
                }
            };
        }
        let coeffs = self.effective_coeffs(n)?;
        match self.precision {
            Precision::F64 => fft_matvec_batch(&coeffs, x, self.strategy),
            Precision::F32 => {
                let y = fft_matvec_batch(&coeffs.cast::<f32>(), x.mapv(|v| v as f32).view(), self.strategy)?;
                Ok(y.mapv(f64::from))
            }
        }
    }

    /// Returns `dL/dx` and accumulates parameter gradients into `grads`.
    pub fn backward(
        &self,
        x: ArrayView3<'_, f64>,
        grad_y: ArrayView3<'_, f64>,
        grads: &mut ToeplitzOperator,
    ) -> Result<Array3<f64>> {
        self.check_input(&x)?;
        let n = x.dim().1;
        let (raw, cache) = self.rpe.forward_cached(n)?;
        let eff = self.apply_bias(&raw);
        let (grad_x, grad_eff) = match self.precision {
            Precision::F64 => matvec_backward_batch(&eff, x, grad_y, self.strategy)?,
            Precision::F32 => {
                let (gx, gc) = matvec_backward_batch(
                    &eff.cast::<f32>(),
                    x.mapv(|v| v as f32).view(),
                    grad_y.mapv(|v| v as f32).view(),
                    self.strategy,
                )?;
                (gx.mapv(f64::from), gc.cast::<f64>())
            }
        };

        // d t_eff[k] / d rpe[k] = lambda^|k| (or 0 where masked): the same bias again.
        let grad_raw = self.apply_bias(&grad_eff);
        self.rpe.backward(&cache, grad_raw.values().view(), &mut grads.rpe)?;

        if self.learnable_decay {
            let decay = self.decay();
            let mut d_decay = 0.0;
            for (row, (g, t)) in grad_eff
                .values()
                .outer_iter()
                .zip(raw.values().outer_iter())
                .enumerate()
            {
                let k = row as isize - (n as isize - 1);
                if k == 0 || (self.causal && k < 0) {
                    continue;
                }
                let m = k.unsigned_abs() as i32;
                let dscale = m as f64 * decay.powi(m - 1);
                d_decay += dscale * g.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
            }
            grads.decay[0] += d_decay;
        }
        Ok(grad_x)
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Range(format!("decay rate {decay} is outside [0, 1]")));
    }
    Ok(())
}

pub fn effective_coeffs(op: &ToeplitzOperator, n: usize) -> Result<RelPosCoefficients> {
    Ok((*op.effective_coeffs(n)?).clone())
}

pub fn tno_forward(op: &ToeplitzOperator, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    op.forward(x)
}

/// `(dL/dx, parameter gradients laid out like op)`.
pub fn tno_backward(
    op: &ToeplitzOperator,
    x: ArrayView3<'_, f64>,
    grad_y: ArrayView3<'_, f64>,
) -> Result<(Array3<f64>, ToeplitzOperator)> {
    let mut grads = crate::params::zeros_like(op);
    let gx = op.backward(x, grad_y, &mut grads)?;
    Ok((gx, grads))
}

/// Writes a coefficient table as `offset,channel,value` rows.
pub fn write_coeffs_csv<W: Write>(coeffs: &RelPosCoefficients, mut out: W) -> std::io::Result<()> {
    writeln!(out, "offset,channel,value")?;
    for (row, values) in coeffs.values().outer_iter().enumerate() {
        let k = coeffs.offset_of(row);
        for (c, v) in values.iter().enumerate() {
            writeln!(out, "{k},{c},{v}")?;
        }
    }
    Ok(())
}

impl Parameters for ToeplitzOperator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.rpe.visit(&join(prefix, "rpe"), f);
        if self.learnable_decay {
            visit_array(&self.decay, &join(prefix, "decay"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.invalidate();
        self.rpe.visit_mut(&join(prefix, "rpe"), f);
        if self.learnable_decay {
            visit_array_mut(&mut self.decay, &join(prefix, "decay"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_differences, max_rel_err, max_rel_err_floor, random_array};
    use crate::nn::Activation;
    use crate::params::{flatten, unflatten};
    use crate::rpe::{InputMode, RpeConfig};
    use crate::toeplitz::naive_matvec;
    use ndarray::{array, Array2, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(d: usize) -> RpeConfig {
        RpeConfig {
            layers: 3,
            hidden_dim: 6,
            out_dim: d,
            activation: Activation::Silu,
            input_mode: InputMode::RawInteger,
        }
    }

    /// RPE whose output is the constant 1 on every channel.
    fn unit_rpe(d: usize) -> RpeNet {
        let mut net = RpeNet::zeros(RpeConfig { layers: 1, ..cfg(d) }).unwrap();
        net.layers[0].bias = Some(Array1::ones(d));
        net
    }

    #[test]
    fn no_decay_leaves_coefficients_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = RpeNet::new(cfg(2), &mut rng).unwrap();
        let raw = net.forward(9).unwrap();
        let op = ToeplitzOperator::new(net, 1.0, false).unwrap();
        assert_eq!(*op.effective_coeffs(9).unwrap(), raw);
    }

    #[test]
    fn decay_examples() {
        let op = ToeplitzOperator::new(unit_rpe(2), 0.5, false).unwrap();
        let t = op.effective_coeffs(4).unwrap();
        assert_eq!(t.get(2, 0), 0.25);
        assert_eq!(t.get(-2, 1), 0.25);
        for k in -3isize..=3 {
            assert_eq!(t.get(k, 0), 0.5f64.powi(k.unsigned_abs() as i32));
        }
        let causal = ToeplitzOperator::new(unit_rpe(2), 0.5, true).unwrap();
        let t = causal.effective_coeffs(4).unwrap();
        assert!(t.offset_row(-1).iter().all(|&v| v == 0.0));
        assert_eq!(t.get(0, 0), 1.0);
        assert!(ToeplitzOperator::new(unit_rpe(1), 1.5, false).is_err());
    }

    #[test]
    fn zero_decay_is_diagonal() {
        let op = ToeplitzOperator::new(unit_rpe(1), 0.0, false).unwrap();
        let t = op.effective_coeffs(5).unwrap();
        assert_eq!(*t, RelPosCoefficients::identity(5, 1));
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = ToeplitzOperator::new(RpeNet::new(cfg(3), &mut rng).unwrap(), 0.9, false).unwrap();
        let x: Array3<f64> = random_array(&mut rng, (2, 16, 3));
        let y = op.forward(x.view()).unwrap();
        let coeffs = op.effective_coeffs(16).unwrap();
        for b in 0..2 {
            let expected = naive_matvec(&coeffs, x.index_axis(Axis(0), b)).unwrap();
            assert!(max_rel_err(&y.index_axis(Axis(0), b), &expected) <= 1e-9);
        }
        assert!(op.forward(Array3::zeros((1, 16, 3)).view()).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(op.forward(Array3::zeros((1, 16, 2)).view()), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_operator_passes_input_through() {
        let mut net = RpeNet::zeros(RpeConfig { layers: 1, ..cfg(1) }).unwrap();
        net.layers[0].bias = Some(array![1.0]);
        // lambda = 0 keeps only offset 0, whose coefficient is 1
        let op = ToeplitzOperator::new(net, 0.0, false).unwrap();
        let x = Array3::from_shape_fn((1, 7, 1), |(_, i, _)| i as f64 - 2.0);
        let y = op.forward(x.view()).unwrap();
        assert!(max_rel_err(&y, &x) < 1e-14);
    }

    #[test]
    fn causal_output_ignores_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = ToeplitzOperator::new(RpeNet::new(cfg(2), &mut rng).unwrap(), 0.95, true).unwrap();
        let x: Array3<f64> = random_array(&mut rng, (1, 20, 2));
        let y = op.forward(x.view()).unwrap();
        let mut x2 = x.clone();
        for i in 12..20 {
            x2[[0, i, 0]] += 3.0;
        }
        let y2 = op.forward(x2.view()).unwrap();
        for i in 0..12 {
            assert_eq!(y.index_axis(Axis(1), i), y2.index_axis(Axis(1), i));
        }
        let coeffs = op.effective_coeffs(20).unwrap();
        let expected = naive_matvec(&coeffs, x.index_axis(Axis(0), 0)).unwrap();
        assert!(max_rel_err(&y.index_axis(Axis(0), 0), &expected) < 1e-12);
    }

    #[test]
    fn cache_is_invalidated_by_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut op = ToeplitzOperator::new(RpeNet::new(cfg(2), &mut rng).unwrap(), 0.9, false).unwrap();
        let before = op.effective_coeffs(6).unwrap();
        op.visit_mut("", &mut |_, _, data| data.iter_mut().for_each(|v| *v += 0.1));
        let after = op.effective_coeffs(6).unwrap();
        assert_ne!(*before, *after);
        assert_eq!(*after, op.apply_bias(&op.rpe().forward(6).unwrap()));
    }

    fn gradient_check(causal: bool, learnable: bool, decay: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = ToeplitzOperator::new(RpeNet::new(cfg(2), &mut rng).unwrap(), decay, causal)
            .unwrap()
            .with_learnable_decay(learnable);
        let x: Array3<f64> = random_array(&mut rng, (2, 12, 2));
        let w: Array3<f64> = random_array(&mut rng, (2, 12, 2));
        let (gx, grads) = tno_backward(&op, x.view(), w.view()).unwrap();

        let mut xs = x.clone().into_raw_vec_and_offset().0;
        let fd_x = central_differences(&mut xs, 1e-5, |v| {
            let xv = ArrayView3::from_shape((2, 12, 2), v).unwrap();
            (op.forward(xv).unwrap() * &w).sum()
        });
        assert!(max_rel_err_floor(gx.as_slice().unwrap(), &fd_x, 1e-6) < 1e-5);

        let mut p = flatten(&op);
        let fd_p = central_differences(&mut p, 1e-5, |v| {
            let mut probe = op.clone();
            unflatten(&mut probe, v);
            (probe.forward(x.view()).unwrap() * &w).sum()
        });
        assert!(max_rel_err_floor(&flatten(&grads), &fd_p, 1e-6) < 1e-5);
    }

    #[test]
    fn gradients_bidirectional() {
        gradient_check(false, false, 0.9);
    }

    #[test]
    fn gradients_causal_with_learnable_decay() {
        gradient_check(true, true, 0.8);
    }

    #[test]
    fn zero_decay_routes_gradient_to_offset_zero_only() {
        let op = ToeplitzOperator::new(unit_rpe(1), 0.0, false).unwrap();
        let x = Array3::from_shape_fn((1, 4, 1), |(_, i, _)| 1.0 + i as f64);
        let g = Array3::from_elem((1, 4, 1), 1.0);
        let (_, grads) = tno_backward(&op, x.view(), g.view()).unwrap();
        // Single affine layer: dL/dw = sum_k k * dL/dt[k], dL/db = sum_k dL/dt[k];
        // only k = 0 survives, so dL/dw = 0 and dL/db = sum_i x_i.
        assert_eq!(grads.rpe().layers[0].weight[[0, 0]], 0.0);
        assert!((grads.rpe().layers[0].bias.as_ref().unwrap()[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn coefficient_csv_dump() {
        let op = ToeplitzOperator::new(unit_rpe(2), 0.5, true).unwrap();
        let mut buf = Vec::new();
        write_coeffs_csv(&op.effective_coeffs(2).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "offset,channel,value\n-1,0,0\n-1,1,0\n0,0,1\n0,1,1\n1,0,0.5\n1,1,0.5\n"
        );
    }

    #[test]
    fn single_precision_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = ToeplitzOperator::new(RpeNet::new(cfg(2), &mut rng).unwrap(), 0.9, false).unwrap();
        let op32 = op.clone().with_precision(Precision::F32);
        let x: Array3<f64> = random_array(&mut rng, (1, 50, 2));
        let a = op.forward(x.view()).unwrap();
        let b = op32.forward(x.view()).unwrap();
        assert!(max_rel_err(&b, &a) < 1e-4);
        let _: Array2<f64> = a.index_axis_move(Axis(0), 0);
    }
}
