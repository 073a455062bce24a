//! Dense layers, activations and normalization with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::params::{join, visit_array, visit_array_mut, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Silu,
    Identity,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            other => Err(format!("unknown activation `{other}` (expected relu, silu or identity)")),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, pre: &Array2<f64>) -> Array2<f64> {
        pre.mapv(|v| self.apply(v))
    }

    /// `grad_out * act'(pre)`.
    pub fn backward(self, pre: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        let mut g = grad_out.clone();
        g.zip_mut_with(pre, |g, &p| *g *= self.derivative(p));
        g
    }
}

/// `y = x W (+ b)` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Dense {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..bound);
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw);
        let bias = bias.then(|| Array1::from_shape_simple_fn(fan_out, &mut draw));
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: bias.then(|| Array1::zeros(fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, f64>, grad_out: &Array2<f64>, grads: &mut Dense) -> Array2<f64> {
        grads.weight += &x.t().dot(grad_out);
        if let Some(gb) = &mut grads.bias {
            *gb += &grad_out.sum_axis(Axis(0));
        }
        grad_out.dot(&self.weight.t())
    }
}

impl Parameters for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array(&self.weight, &join(prefix, "weight"), f);
        if let Some(b) = &self.bias {
            visit_array(b, &join(prefix, "bias"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array_mut(&mut self.weight, &join(prefix, "weight"), f);
        if let Some(b) = &mut self.bias {
            visit_array_mut(b, &join(prefix, "bias"), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    LayerNorm,
    RmsNorm,
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "layernorm" => Ok(NormKind::LayerNorm),
            "rmsnorm" => Ok(NormKind::RmsNorm),
            other => Err(format!("unknown norm `{other}` (expected layernorm or rmsnorm)")),
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// Row-wise normalization over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub gain: Array1<f64>,
    /// Present only for layer norm.
    pub shift: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Array2<f64>,
    inv_scale: Array1<f64>,
}

impl Norm {
    pub fn new(kind: NormKind, dim: usize) -> Self {
        Self {
            kind,
            gain: Array1::ones(dim),
            shift: (kind == NormKind::LayerNorm).then(|| Array1::zeros(dim)),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, NormCache) {
        let dim = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_scale = Array1::zeros(x.nrows());
        for (mut row, inv) in normalized.outer_iter_mut().zip(inv_scale.iter_mut()) {
            if self.kind == NormKind::LayerNorm {
                let mean = row.sum() / dim;
                row -= mean;
            }
            let ms = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *inv = 1.0 / (ms + NORM_EPS).sqrt();
            row *= *inv;
        }
        let mut y = &normalized * &self.gain;
        if let Some(s) = &self.shift {
            y += s;
        }
        (y, NormCache { normalized, inv_scale })
    }

    pub fn backward(&self, cache: &NormCache, grad_out: &Array2<f64>, grads: &mut Norm) -> Array2<f64> {
        grads.gain += &(grad_out * &cache.normalized).sum_axis(Axis(0));
        if let Some(gs) = &mut grads.shift {
            *gs += &grad_out.sum_axis(Axis(0));
        }
        let dim = grad_out.ncols() as f64;
        let mut grad_in = grad_out * &self.gain;
        for ((mut g, xh), &inv) in grad_in
            .outer_iter_mut()
            .zip(cache.normalized.outer_iter())
            .zip(&cache.inv_scale)
        {
            let dot = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / dim;
            let mean = if self.kind == NormKind::LayerNorm {
                g.sum() / dim
            } else {
                0.0
            };
            g.zip_mut_with(&xh, |gv, &xv| *gv = (*gv - mean - xv * dot) * inv);
        }
        grad_in
    }
}

impl Parameters for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array(&self.gain, &join(prefix, "gain"), f);
        if let Some(s) = &self.shift {
            visit_array(s, &join(prefix, "shift"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array_mut(&mut self.gain, &join(prefix, "gain"), f);
        if let Some(s) = &mut self.shift {
            visit_array_mut(s, &join(prefix, "shift"), f);
        }
    }
}
