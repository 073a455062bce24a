//! The sequence-modeling block: a gated Toeplitz unit for token mixing and a
//! GLU for channel mixing, each behind a pre-norm residual connection.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Norm, NormCache};
use crate::params::{join, Parameters};
use crate::tno::ToeplitzOperator;

/// `(act(X W_u) ⊙ TNO(act(X W_v))) W_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gtu {
    pub w_u: Dense,
    pub w_v: Dense,
    pub w_o: Dense,
    pub activation: Activation,
    pub tno: ToeplitzOperator,
}

#[derive(Debug, Clone)]
pub struct GtuCache {
    input: Array2<f64>,
    pre_u: Array2<f64>,
    pre_v: Array2<f64>,
    u: Array2<f64>,
    v: Array2<f64>,
    mixed: Array2<f64>,
    gated: Array2<f64>,
}

/// `(act(X W_1) ⊙ X W_2) W_3`, position-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Glu {
    pub w1: Dense,
    pub w2: Dense,
    pub w3: Dense,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct GluCache {
    input: Array2<f64>,
    pre_a: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    gated: Array2<f64>,
}

fn as_rows(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (b, n, d) = x.dim();
    x.to_owned()
        .into_shape_with_order((b * n, d))
        .expect("contiguous activations")
}

fn as_seq(x: Array2<f64>, batch: usize, n: usize) -> Array3<f64> {
    let d = x.ncols();
    x.into_shape_with_order((batch, n, d)).expect("contiguous activations")
}

impl Gtu {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d: usize, e: usize, activation: Activation, tno: ToeplitzOperator) -> Result<Self> {
        if tno.channels() != e {
            return Err(Error::Config(format!(
                "GTU width {e} does not match TNO channels {}",
                tno.channels()
            )));
        }
        Ok(Self {
            w_u: Dense::init(rng, d, e, false),
            w_v: Dense::init(rng, d, e, false),
            w_o: Dense::init(rng, e, d, false),
            activation,
            tno,
        })
    }

    /// `x` is `[batch * n, d]` with rows ordered batch-major.
    pub fn forward_rows(&self, x: ArrayView2<'_, f64>, batch: usize, n: usize) -> Result<(Array2<f64>, GtuCache)> {
        if x.ncols() != self.w_u.fan_in() || x.nrows() != batch * n {
            return Err(Error::dim(format!(
                "GTU input is {:?}, expected [{}, {}]",
                x.shape(),
                batch * n,
                self.w_u.fan_in()
            )));
        }
        let pre_u = self.w_u.forward(x);
        let pre_v = self.w_v.forward(x);
        let u = self.activation.forward(&pre_u);
        let v = self.activation.forward(&pre_v);
        let v3 = v.view().into_shape_with_order((batch, n, v.ncols())).expect("contiguous");
        let mixed = as_rows(self.tno.forward(v3)?.view());
        let gated = &u * &mixed;
        let out = self.w_o.forward(gated.view());
        Ok((
            out,
            GtuCache {
                input: x.to_owned(),
                pre_u,
                pre_v,
                u,
                v,
                mixed,
                gated,
            },
        ))
    }

    pub fn backward_rows(
        &self,
        cache: &GtuCache,
        grad_out: &Array2<f64>,
        batch: usize,
        n: usize,
        grads: &mut Gtu,
    ) -> Result<Array2<f64>> {
        let grad_gated = self.w_o.backward(cache.gated.view(), grad_out, &mut grads.w_o);
        let grad_u = &grad_gated * &cache.mixed;
        let grad_mixed = &grad_gated * &cache.u;
        let e = cache.v.ncols();
        let v3 = cache.v.view().into_shape_with_order((batch, n, e)).expect("contiguous");
        let gm3 = grad_mixed.view().into_shape_with_order((batch, n, e)).expect("contiguous");
        let grad_v = as_rows(self.tno.backward(v3, gm3, &mut grads.tno)?.view());
        let grad_pre_u = self.activation.backward(&cache.pre_u, &grad_u);
        let grad_pre_v = self.activation.backward(&cache.pre_v, &grad_v);
        let mut grad_in = self.w_u.backward(cache.input.view(), &grad_pre_u, &mut grads.w_u);
        grad_in += &self.w_v.backward(cache.input.view(), &grad_pre_v, &mut grads.w_v);
        Ok(grad_in)
    }
}

impl Glu {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d: usize, g: usize, activation: Activation) -> Self {
        Self {
            w1: Dense::init(rng, d, g, false),
            w2: Dense::init(rng, d, g, false),
            w3: Dense::init(rng, g, d, false),
            activation,
        }
    }

    pub fn forward_rows(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, GluCache)> {
        if x.ncols() != self.w1.fan_in() {
            return Err(Error::dim(format!(
                "GLU input has {} features, expected {}",
                x.ncols(),
                self.w1.fan_in()
            )));
        }
        let pre_a = self.w1.forward(x);
        let a = self.activation.forward(&pre_a);
        let b = self.w2.forward(x);
        let gated = &a * &b;
        let out = self.w3.forward(gated.view());
        Ok((
            out,
            GluCache {
                input: x.to_owned(),
                pre_a,
                a,
                b,
                gated,
            },
        ))
    }

    pub fn backward_rows(&self, cache: &GluCache, grad_out: &Array2<f64>, grads: &mut Glu) -> Array2<f64> {
        let grad_gated = self.w3.backward(cache.gated.view(), grad_out, &mut grads.w3);
        let grad_a = &grad_gated * &cache.b;
        let grad_b = &grad_gated * &cache.a;
        let grad_pre_a = self.activation.backward(&cache.pre_a, &grad_a);
        let mut grad_in = self.w1.backward(cache.input.view(), &grad_pre_a, &mut grads.w1);
        grad_in += &self.w2.backward(cache.input.view(), &grad_b, &mut grads.w2);
        grad_in
    }
}

pub fn gtu_forward(gtu: &Gtu, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (batch, n, _) = x.dim();
    let (out, _) = gtu.forward_rows(as_rows(x).view(), batch, n)?;
    Ok(as_seq(out, batch, n))
}

pub fn glu_forward(glu: &Glu, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (batch, n, _) = x.dim();
    let (out, _) = glu.forward_rows(as_rows(x).view())?;
    Ok(as_seq(out, batch, n))
}

/// `X += GTU(norm(X)); X += GLU(norm(X))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub gtu: Gtu,
    pub norm2: Norm,
    pub glu: Glu,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    norm1: NormCache,
    gtu: GtuCache,
    norm2: NormCache,
    glu: GluCache,
}

impl Block {
    pub fn forward_rows(&self, x: &Array2<f64>, batch: usize, n: usize) -> Result<(Array2<f64>, BlockCache)> {
        let (h1, norm1) = self.norm1.forward(x.view());
        let (g, gtu) = self.gtu.forward_rows(h1.view(), batch, n)?;
        let mid = x + &g;
        let (h2, norm2) = self.norm2.forward(mid.view());
        let (c, glu) = self.glu.forward_rows(h2.view())?;
        let out = mid + &c;
        Ok((out, BlockCache { norm1, gtu, norm2, glu }))
    }

    pub fn backward_rows(
        &self,
        cache: &BlockCache,
        grad_out: &Array2<f64>,
        batch: usize,
        n: usize,
        grads: &mut Block,
    ) -> Result<Array2<f64>> {
        let grad_h2 = self.glu.backward_rows(&cache.glu, grad_out, &mut grads.glu);
        let grad_mid = grad_out + &self.norm2.backward(&cache.norm2, &grad_h2, &mut grads.norm2);
        let grad_h1 = self.gtu.backward_rows(&cache.gtu, &grad_mid, batch, n, &mut grads.gtu)?;
        Ok(&grad_mid + &self.norm1.backward(&cache.norm1, &grad_h1, &mut grads.norm1))
    }
}

impl Parameters for Gtu {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.w_u.visit(&join(prefix, "w_u"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        self.w_o.visit(&join(prefix, "w_o"), f);
        self.tno.visit(&join(prefix, "tno"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.w_u.visit_mut(&join(prefix, "w_u"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        self.w_o.visit_mut(&join(prefix, "w_o"), f);
        self.tno.visit_mut(&join(prefix, "tno"), f);
    }
}

impl Parameters for Glu {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.w1.visit(&join(prefix, "w1"), f);
        self.w2.visit(&join(prefix, "w2"), f);
        self.w3.visit(&join(prefix, "w3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.w1.visit_mut(&join(prefix, "w1"), f);
        self.w2.visit_mut(&join(prefix, "w2"), f);
        self.w3.visit_mut(&join(prefix, "w3"), f);
    }
}

impl Block {
    /// Visits everything except the TNO, which the model visits itself so
    /// that a shared RPE is only listed once.
    pub(crate) fn visit_without_tno(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.gtu.w_u.visit(&join(prefix, "gtu.w_u"), f);
        self.gtu.w_v.visit(&join(prefix, "gtu.w_v"), f);
        self.gtu.w_o.visit(&join(prefix, "gtu.w_o"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.glu.visit(&join(prefix, "glu"), f);
    }

    pub(crate) fn visit_without_tno_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.gtu.w_u.visit_mut(&join(prefix, "gtu.w_u"), f);
        self.gtu.w_v.visit_mut(&join(prefix, "gtu.w_v"), f);
        self.gtu.w_o.visit_mut(&join(prefix, "gtu.w_o"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.glu.visit_mut(&join(prefix, "glu"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{max_rel_err, random_array};
    use crate::rpe::{InputMode, RpeConfig, RpeNet};
    use crate::toeplitz::naive_matvec;
    use ndarray::{Array1, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rpe_cfg(e: usize) -> RpeConfig {
        RpeConfig {
            layers: 2,
            hidden_dim: 4,
            out_dim: e,
            activation: Activation::Relu,
            input_mode: InputMode::RawInteger,
        }
    }

    fn identity_tno(e: usize) -> ToeplitzOperator {
        let mut net = RpeNet::zeros(RpeConfig { layers: 1, ..rpe_cfg(e) }).unwrap();
        net.layers[0].bias = Some(Array1::ones(e));
        ToeplitzOperator::new(net, 0.0, false).unwrap()
    }

    #[test]
    fn zero_gate_annihilates_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tno = ToeplitzOperator::new(RpeNet::new(rpe_cfg(6), &mut rng).unwrap(), 0.9, false).unwrap();
        let mut gtu = Gtu::new(&mut rng, 3, 6, Activation::Silu, tno).unwrap();
        gtu.w_u.weight.fill(0.0);
        let x: Array3<f64> = random_array(&mut rng, (2, 5, 3));
        assert!(gtu_forward(&gtu, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_tno_reduces_to_bilinear_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gtu = Gtu::new(&mut rng, 3, 6, Activation::Identity, identity_tno(6)).unwrap();
        let x: Array3<f64> = random_array(&mut rng, (2, 5, 3));
        let rows = as_rows(x.view());
        let expected = (rows.dot(&gtu.w_u.weight) * rows.dot(&gtu.w_v.weight)).dot(&gtu.w_o.weight);
        let got = as_rows(gtu_forward(&gtu, x.view()).unwrap().view());
        assert!(max_rel_err(&got, &expected) < 1e-14);
    }

    #[test]
    fn gtu_matches_staged_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tno = ToeplitzOperator::new(RpeNet::new(rpe_cfg(4), &mut rng).unwrap(), 0.8, true).unwrap();
        let gtu = Gtu::new(&mut rng, 2, 4, Activation::Silu, tno).unwrap();
        let x: Array3<f64> = random_array(&mut rng, (1, 8, 2));
        let xs = x.index_axis(Axis(0), 0);
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let u = xs.dot(&gtu.w_u.weight).mapv(silu);
        let v = xs.dot(&gtu.w_v.weight).mapv(silu);
        let coeffs = gtu.tno.effective_coeffs(8).unwrap();
        let m = naive_matvec(&coeffs, v.view()).unwrap();
        let expected = (u * m).dot(&gtu.w_o.weight);
        let got = gtu_forward(&gtu, x.view()).unwrap();
        assert!(max_rel_err(&got.index_axis(Axis(0), 0), &expected) < 1e-12);
    }

    #[test]
    fn glu_is_position_wise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let glu = Glu::new(&mut rng, 3, 5, Activation::Silu);
        let x: Array3<f64> = random_array(&mut rng, (2, 6, 3));
        let full = glu_forward(&glu, x.view()).unwrap();
        for b in 0..2 {
            for i in 0..6 {
                let single = x.slice(ndarray::s![b..b + 1, i..i + 1, ..]);
                let one = glu_forward(&glu, single).unwrap();
                assert_eq!(one[[0, 0, 0]], full[[b, i, 0]]);
                assert_eq!(one.index_axis(Axis(0), 0).row(0), full.index_axis(Axis(0), b).row(i));
            }
        }
        let xs = as_rows(x.view());
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let expected = (xs.dot(&glu.w1.weight).mapv(silu) * xs.dot(&glu.w2.weight)).dot(&glu.w3.weight);
        assert!(max_rel_err(&as_rows(full.view()), &expected) < 1e-14);

        let mut zeroed = glu.clone();
        zeroed.w2.weight.fill(0.0);
        assert!(glu_forward(&zeroed, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(Gtu::new(&mut rng, 3, 6, Activation::Silu, identity_tno(5)).is_err());
        let glu = Glu::new(&mut rng, 3, 5, Activation::Silu);
        assert!(glu_forward(&glu, Array3::zeros((1, 2, 4)).view()).is_err());
    }
}
