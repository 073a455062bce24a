//! Relative position encoder: a small MLP from a scalar offset to one
//! Toeplitz coefficient per channel.
//!
//! Because the network is evaluated per offset, its parameter count depends
//! only on [`RpeConfig`] and the same network serves every sequence length.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense};
use crate::params::{join, Parameters};
use crate::toeplitz::RelPosCoefficients;

/// Number of `(sin, cos)` pairs in [`InputMode::Sincos`].
pub const SINCOS_PAIRS: usize = 4;

/// How an integer offset is presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `[k]`.
    #[default]
    RawInteger,
    /// `[k / n]`. The same offset maps to different inputs at different
    /// lengths, so this mode does not extrapolate.
    Normalized,
    /// `[sin(k w_0), cos(k w_0), ..., sin(k w_3), cos(k w_3)]` with
    /// `w_i = 10000^(-2i / 8)`.
    Sincos,
}

impl InputMode {
    pub fn width(self) -> usize {
        match self {
            InputMode::RawInteger | InputMode::Normalized => 1,
            InputMode::Sincos => 2 * SINCOS_PAIRS,
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw_integer" => Ok(InputMode::RawInteger),
            "normalized" => Ok(InputMode::Normalized),
            "sincos" => Ok(InputMode::Sincos),
            other => Err(format!(
                "unknown rpe input mode `{other}` (expected raw_integer, normalized or sincos)"
            )),
        }
    }
}

/// Feature vector for offset `k` at sequence length `n`.
pub fn encode_input(k: isize, mode: InputMode, n: usize) -> Result<Vec<f64>> {
    if k.unsigned_abs() >= n {
        return Err(Error::Range(format!("offset {k} is outside -(n-1)..=(n-1) for n = {n}")));
    }
    let kf = k as f64;
    Ok(match mode {
        InputMode::RawInteger => vec![kf],
        InputMode::Normalized => vec![kf / n as f64],
        InputMode::Sincos => (0..SINCOS_PAIRS)
            .flat_map(|i| {
                let w = 10000f64.powf(-(2.0 * i as f64) / (2 * SINCOS_PAIRS) as f64);
                [(kf * w).sin(), (kf * w).cos()]
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RpeConfig {
    /// Number of dense layers, output projection included.
    pub layers: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub input_mode: InputMode,
}

impl RpeConfig {
    /// Six layers of width 64 with ReLU.
    pub fn paper(out_dim: usize) -> Self {
        Self {
            layers: 6,
            hidden_dim: 64,
            out_dim,
            activation: Activation::Relu,
            input_mode: InputMode::RawInteger,
        }
    }

    /// Three layers of width 32, sized for laptop training.
    pub fn desk(out_dim: usize) -> Self {
        Self {
            layers: 3,
            hidden_dim: 32,
            ..Self::paper(out_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!(
                "rpe layers, hidden_dim and out_dim must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let input = self.input_mode.width();
        if self.layers == 1 {
            return vec![(input, self.out_dim)];
        }
        let mut shapes = vec![(input, self.hidden_dim)];
        shapes.extend((0..self.layers - 2).map(|_| (self.hidden_dim, self.hidden_dim)));
        shapes.push((self.hidden_dim, self.out_dim));
        shapes
    }

    /// Weights plus biases of every layer.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpeNet {
    pub config: RpeConfig,
    pub layers: Vec<Dense>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RpeCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

impl RpeNet {
    pub fn new<R: Rng + ?Sized>(config: RpeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::init(rng, i, o, true))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: RpeConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o, true))
            .collect();
        Ok(Self { config, layers })
    }

    /// Inputs for all `2n - 1` offsets, most negative first.
    pub fn input_table(&self, n: usize) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::dim("sequence length must be positive"));
        }
        let mode = self.config.input_mode;
        let mut table = Array2::zeros((2 * n - 1, mode.width()));
        for (row, k) in (-(n as isize - 1)..n as isize).enumerate() {
            for (c, v) in encode_input(k, mode, n)?.into_iter().enumerate() {
                table[[row, c]] = v;
            }
        }
        Ok(table)
    }

    pub fn forward_cached(&self, n: usize) -> Result<(RelPosCoefficients, RpeCache)> {
        let mut h = self.input_table(n)?;
        let mut cache = RpeCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(h.view());
            cache.inputs.push(h);
            if i == last {
                h = pre;
            } else {
                h = self.config.activation.forward(&pre);
                cache.pre.push(pre);
            }
        }
        Ok((RelPosCoefficients::new(n, h)?, cache))
    }

    /// Evaluates the network at offsets `-(n-1) ..= n-1`.
    pub fn forward(&self, n: usize) -> Result<RelPosCoefficients> {
        Ok(self.forward_cached(n)?.0)
    }

    /// Accumulates weight gradients for `dL/dt` into `grads`.
    pub fn backward(&self, cache: &RpeCache, grad_coeffs: ArrayView2<'_, f64>, grads: &mut RpeNet) -> Result<()> {
        let expected = (cache.inputs[0].nrows(), self.config.out_dim);
        if grad_coeffs.dim() != expected {
            return Err(Error::dim(format!(
                "coefficient gradient is {:?}, expected {:?}",
                grad_coeffs.shape(),
                expected
            )));
        }
        let mut g = grad_coeffs.to_owned();
        for i in (0..self.layers.len()).rev() {
            if i != self.layers.len() - 1 {
                g = self.config.activation.backward(&cache.pre[i], &g);
            }
            g = self.layers[i].backward(cache.inputs[i].view(), &g, &mut grads.layers[i]);
        }
        Ok(())
    }
}

/// Coefficient table for sequence length `n`.
pub fn rpe_forward(net: &RpeNet, n: usize) -> Result<RelPosCoefficients> {
    net.forward(n)
}

/// Weight gradients, laid out like `net`, for the loss gradient `grad_coeffs`.
pub fn rpe_backward(net: &RpeNet, n: usize, grad_coeffs: &RelPosCoefficients) -> Result<RpeNet> {
    if grad_coeffs.len() != n {
        return Err(Error::dim(format!(
            "gradient table is for n = {}, expected {n}",
            grad_coeffs.len()
        )));
    }
    let (_, cache) = net.forward_cached(n)?;
    let mut grads = crate::params::zeros_like(net);
    net.backward(&cache, grad_coeffs.values().view(), &mut grads)?;
    Ok(grads)
}

impl Parameters for RpeNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_differences, max_rel_err_floor, random_array};
    use crate::params::{flatten, param_count, unflatten};
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(layers: usize, mode: InputMode) -> RpeConfig {
        RpeConfig {
            layers,
            hidden_dim: 5,
            out_dim: 3,
            activation: Activation::Relu,
            input_mode: mode,
        }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_input(0, InputMode::RawInteger, 1).unwrap(), vec![0.0]);
        assert_eq!(encode_input(-3, InputMode::Normalized, 4).unwrap(), vec![-0.75]);
        assert!(matches!(encode_input(4, InputMode::RawInteger, 4), Err(Error::Range(_))));
        assert!(matches!(encode_input(-4, InputMode::Sincos, 4), Err(Error::Range(_))));
    }

    #[test]
    fn sincos_schedule() {
        let v = encode_input(2, InputMode::Sincos, 8).unwrap();
        let freqs = [1.0, 0.1, 0.01, 0.001];
        let expected: Vec<f64> = freqs.iter().flat_map(|w: &f64| [(2.0 * w).sin(), (2.0 * w).cos()]).collect();
        assert_eq!(v.len(), 8);
        for (a, b) in v.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_network_gives_zero_table() {
        let net = RpeNet::zeros(cfg(3, InputMode::RawInteger)).unwrap();
        for n in [1, 5, 20] {
            assert!(net.forward(n).unwrap().values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_layer_is_affine_in_offset() {
        let mut net = RpeNet::zeros(cfg(1, InputMode::RawInteger)).unwrap();
        net.layers[0].weight = array![[0.5, -2.0, 1.0]];
        net.layers[0].bias = Some(array![1.0, 0.0, -3.0]);
        let t = net.forward(4).unwrap();
        for k in -3..=3 {
            for (c, (w, b)) in [(0.5, 1.0), (-2.0, 0.0), (1.0, -3.0)].into_iter().enumerate() {
                assert_eq!(t.get(k, c), w * k as f64 + b);
            }
        }
        let g = RelPosCoefficients::from_fn(4, 3, |k, c| (k as f64 + 0.5) * (c as f64 + 1.0)).unwrap();
        let grads = rpe_backward(&net, 4, &g).unwrap();
        for c in 0..3 {
            let dw: f64 = (-3..=3).map(|k| k as f64 * g.get(k, c)).sum();
            let db: f64 = (-3..=3).map(|k| g.get(k, c)).sum();
            assert!((grads.layers[0].weight[[0, c]] - dw).abs() < 1e-12);
            assert!((grads.layers[0].bias.as_ref().unwrap()[c] - db).abs() < 1e-12);
        }
    }

    /// Evaluates the MLP one offset at a time with plain loops.
    fn scalar_forward(net: &RpeNet, k: isize, n: usize) -> Vec<f64> {
        let mut h = encode_input(k, net.config.input_mode, n).unwrap();
        for (i, layer) in net.layers.iter().enumerate() {
            let b: &Array1<f64> = layer.bias.as_ref().unwrap();
            let mut next = vec![0.0; layer.fan_out()];
            for o in 0..layer.fan_out() {
                let mut acc = b[o];
                for (j, hv) in h.iter().enumerate() {
                    acc += hv * layer.weight[[j, o]];
                }
                next[o] = if i + 1 == net.layers.len() { acc } else { acc.max(0.0) };
            }
            h = next;
        }
        h
    }

    #[test]
    fn forward_matches_offset_by_offset_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [InputMode::RawInteger, InputMode::Normalized, InputMode::Sincos] {
            let net = RpeNet::new(cfg(4, mode), &mut rng).unwrap();
            let t = net.forward(4).unwrap();
            for k in -3..=3 {
                let expected = scalar_forward(&net, k, 4);
                for (c, e) in expected.iter().enumerate() {
                    assert!((t.get(k, c) - e).abs() < 1e-12, "{mode:?} k={k}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut config = cfg(3, InputMode::RawInteger);
        config.activation = Activation::Silu;
        let net = RpeNet::new(config, &mut rng).unwrap();
        let w: Array2<f64> = random_array(&mut rng, (15, 3));
        let g = RelPosCoefficients::new(8, w.clone()).unwrap();
        let grads = rpe_backward(&net, 8, &g).unwrap();
        let mut p = flatten(&net);
        let fd = central_differences(&mut p, 1e-5, |v| {
            let mut probe = net.clone();
            unflatten(&mut probe, v);
            (probe.forward(8).unwrap().values() * &w).sum()
        });
        assert!(max_rel_err_floor(&flatten(&grads), &fd, 1e-7) < 1e-6);
    }

    #[test]
    fn zero_gradient_in_gives_zero_gradient_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = RpeNet::new(cfg(3, InputMode::RawInteger), &mut rng).unwrap();
        let grads = rpe_backward(&net, 6, &RelPosCoefficients::zeros(6, 3)).unwrap();
        assert!(flatten(&grads).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_independence_and_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = RpeNet::new(RpeConfig::desk(6), &mut rng).unwrap();
        let short = net.forward(5).unwrap();
        let long = net.forward(40).unwrap();
        for k in -4..=4 {
            assert_eq!(short.offset_row(k), long.offset_row(k));
        }
        assert_eq!(param_count(&net), net.config.param_count());
        assert_eq!(net.forward(40).unwrap(), long);
    }

    #[test]
    fn layer_count_includes_output_projection() {
        let c = RpeConfig::paper(8);
        assert_eq!(c.layer_shapes().len(), 6);
        assert_eq!(c.layer_shapes()[0], (1, 64));
        assert_eq!(c.layer_shapes()[5], (64, 8));
        assert!(RpeConfig { layers: 0, ..c }.validate().is_err());
    }
}
