//! The full network: token embedding, a stack of GTU + GLU blocks, a final
//! norm and an output projection, trained with next-token cross-entropy.

mod block;
pub mod checkpoint;
pub mod optim;

pub use block::{glu_forward, gtu_forward, Block, BlockCache, Glu, Gtu};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use optim::{lr_at, train_step, AdamConfig, AdamState, StepMetrics};

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Norm, NormCache, NormKind};
use crate::params::{join, visit_array, visit_array_mut, Parameters};
use crate::rpe::{RpeConfig, RpeNet};
use crate::scalar::Precision;
use crate::tno::ToeplitzOperator;
use crate::toeplitz::CirculantStrategy;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Expansion width `e` of the GTU; the TNO runs at this width.
    pub gtu_dim: usize,
    pub glu_dim: usize,
    pub layers: usize,
    pub activation: Activation,
    pub norm: NormKind,
    pub decay: f64,
    pub learnable_decay: bool,
    pub causal: bool,
    pub rpe: RpeConfig,
    /// One RPE (and decay) for every block instead of one per block.
    pub share_rpe: bool,
    pub tied_embeddings: bool,
    pub strategy: CirculantStrategy,
    pub precision: Precision,
}

impl ModelConfig {
    /// Six blocks at width 512, GTU 1536, GLU 512, RPE 6 x 64, decay 0.99.
    pub fn paper_lm(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            gtu_dim: 1536,
            glu_dim: 512,
            layers: 6,
            activation: Activation::Silu,
            norm: NormKind::LayerNorm,
            decay: 0.99,
            learnable_decay: false,
            causal: true,
            rpe: RpeConfig::paper(1536),
            share_rpe: false,
            tied_embeddings: false,
            strategy: CirculantStrategy::PaddedPow2,
            precision: Precision::F64,
        }
    }

    /// Two blocks at width 64 with GTU 192: trains in minutes on one core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            gtu_dim: 192,
            glu_dim: 64,
            layers: 2,
            rpe: RpeConfig::desk(192),
            ..Self::paper_lm(vocab_size)
        }
    }

    /// One block at width 4 and GTU width 8: small enough for exhaustive
    /// finite-difference checks while exercising every tensor kind.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 4,
            gtu_dim: 8,
            glu_dim: 4,
            layers: 1,
            rpe: RpeConfig {
                layers: 3,
                hidden_dim: 8,
                ..RpeConfig::paper(8)
            },
            ..Self::paper_lm(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("glu_dim", self.glu_dim),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.gtu_dim < self.d_model {
            return Err(Error::Config(format!(
                "gtu_dim {} must be at least d_model {}",
                self.gtu_dim, self.d_model
            )));
        }
        if self.rpe.out_dim != self.gtu_dim {
            return Err(Error::Config(format!(
                "rpe out_dim {} must equal gtu_dim {}",
                self.rpe.out_dim, self.gtu_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::Config(format!("decay {} outside [0, 1]", self.decay)));
        }
        self.rpe.validate()
    }

    /// Closed-form parameter count. No term depends on sequence length.
    pub fn param_count(&self) -> usize {
        let (d, e, g, v) = (self.d_model, self.gtu_dim, self.glu_dim, self.vocab_size);
        let norm = match self.norm {
            NormKind::LayerNorm => 2 * d,
            NormKind::RmsNorm => d,
        };
        let tno = self.rpe.param_count() + usize::from(self.learnable_decay);
        let tnos = if self.share_rpe { tno } else { self.layers * tno };
        let block = 3 * d * e + 3 * d * g + 2 * norm;
        let head = if self.tied_embeddings { 0 } else { d * v + v };
        v * d + self.layers * block + tnos + norm + head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TnnModel {
    pub config: ModelConfig,
    /// `[vocab, d]`.
    pub embedding: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    /// `None` when the output projection is tied to the embedding.
    pub head: Option<Dense>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Array2<usize>,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    features: Array2<f64>,
}

impl TnnModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let embedding = Array2::from_shape_simple_fn((config.vocab_size, d), || rng.random_range(-bound..bound));
        let mut blocks = Vec::with_capacity(config.layers);
        let mut shared: Option<ToeplitzOperator> = None;
        for _ in 0..config.layers {
            let tno = match (&shared, config.share_rpe) {
                (Some(op), true) => op.clone(),
                _ => {
                    let op = ToeplitzOperator::new(RpeNet::new(config.rpe, rng)?, config.decay, config.causal)?
                        .with_strategy(config.strategy)
                        .with_precision(config.precision)
                        .with_learnable_decay(config.learnable_decay);
                    shared = Some(op.clone());
                    op
                }
            };
            blocks.push(Block {
                norm1: Norm::new(config.norm, d),
                gtu: Gtu::new(rng, d, config.gtu_dim, config.activation, tno)?,
                norm2: Norm::new(config.norm, d),
                glu: Glu::new(rng, d, config.glu_dim, config.activation),
            });
        }
        let head = (!config.tied_embeddings).then(|| Dense::init(rng, d, config.vocab_size, true));
        Ok(Self {
            final_norm: Norm::new(config.norm, d),
            config,
            embedding,
            blocks,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        crate::params::param_count(self)
    }

    fn check_tokens(&self, tokens: &ArrayView2<'_, usize>) -> Result<()> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::dim("token batch is empty"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Range(format!(
                "token {bad} is outside the vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits as `[batch * n, vocab]` rows plus everything backward needs.
    pub fn forward_cached(&self, tokens: ArrayView2<'_, usize>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_tokens(&tokens)?;
        let (batch, n) = tokens.dim();
        let mut x = Array2::zeros((batch * n, self.config.d_model));
        for (mut row, &t) in x.outer_iter_mut().zip(tokens.iter()) {
            row.assign(&self.embedding.row(t));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_rows(&x, batch, n)?;
            caches.push(cache);
            x = next;
        }
        let (features, final_norm) = self.final_norm.forward(x.view());
        let logits = match &self.head {
            Some(head) => head.forward(features.view()),
            None => features.dot(&self.embedding.t()),
        };
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_owned(),
                blocks: caches,
                final_norm,
                features,
            },
        ))
    }

    /// Logits `[batch, n, vocab]`.
    pub fn forward(&self, tokens: ArrayView2<'_, usize>) -> Result<Array3<f64>> {
        let (batch, n) = tokens.dim();
        let (logits, _) = self.forward_cached(tokens)?;
        Ok(logits
            .into_shape_with_order((batch, n, self.config.vocab_size))
            .expect("contiguous logits"))
    }

    /// Accumulates parameter gradients for `dL/dlogits` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Array2<f64>, grads: &mut TnnModel) -> Result<()> {
        let (batch, n) = cache.tokens.dim();
        let grad_features = match (&self.head, &mut grads.head) {
            (Some(head), Some(gh)) => head.backward(cache.features.view(), grad_logits, gh),
            _ => {
                grads.embedding += &grad_logits.t().dot(&cache.features);
                grad_logits.dot(&self.embedding)
            }
        };
        let mut g = self
            .final_norm
            .backward(&cache.final_norm, &grad_features, &mut grads.final_norm);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            g = block.backward_rows(&cache.blocks[i], &g, batch, n, &mut grads.blocks[i])?;
        }
        for (row, &t) in g.outer_iter().zip(cache.tokens.iter()) {
            let mut target = grads.embedding.row_mut(t);
            target += &row;
        }
        if self.config.share_rpe {
            fold_shared_grads(grads);
        }
        Ok(())
    }

    /// Switches the precision of every Toeplitz product.
    pub fn set_precision(&mut self, precision: Precision) {
        self.config.precision = precision;
        for block in &mut self.blocks {
            block.gtu.tno = block.gtu.tno.clone().with_precision(precision);
        }
    }

    /// Keeps learnable decay rates inside `[0, 1]`.
    pub fn project(&mut self) {
        if self.config.learnable_decay {
            for block in &mut self.blocks {
                block.gtu.tno.clamp_decay();
            }
        }
    }
}

/// Sums the per-block TNO gradients of a shared RPE into block 0.
fn fold_shared_grads(grads: &mut TnnModel) {
    let mut total = crate::params::flatten(&grads.blocks[0].gtu.tno);
    for block in &grads.blocks[1..] {
        for (t, v) in total.iter_mut().zip(crate::params::flatten(&block.gtu.tno)) {
            *t += v;
        }
    }
    crate::params::unflatten(&mut grads.blocks[0].gtu.tno, &total);
    for block in &mut grads.blocks[1..] {
        block.gtu.tno.visit_mut("", &mut |_, _, data| data.fill(0.0));
    }
}

/// Mean next-token cross-entropy over positions `0..n-1` and its logits gradient.
pub fn next_token_loss(logits: &Array2<f64>, tokens: ArrayView2<'_, usize>) -> Result<(f64, Array2<f64>)> {
    let (sum, count, mut grad) = next_token_nats(logits, tokens)?;
    grad /= count as f64;
    Ok((sum / count as f64, grad))
}

/// Summed (not averaged) cross-entropy, the prediction count, and the
/// gradient of the sum.
fn next_token_nats(logits: &Array2<f64>, tokens: ArrayView2<'_, usize>) -> Result<(f64, usize, Array2<f64>)> {
    let (batch, n) = tokens.dim();
    if n < 2 {
        return Err(Error::dim(format!(
            "next-token loss needs at least 2 positions, got {n}"
        )));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for b in 0..batch {
        for i in 0..n - 1 {
            let r = b * n + i;
            let row = logits.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            let target = tokens[[b, i + 1]];
            total += log_z - row[target];
            let mut g = grad.row_mut(r);
            g.zip_mut_with(&row, |gv, &lv| *gv = (lv - log_z).exp());
            g[target] -= 1.0;
        }
    }
    Ok((total, batch * (n - 1), grad))
}

/// `(mean loss, gradients laid out like the model)`.
pub fn loss_and_grads(model: &TnnModel, tokens: ArrayView2<'_, usize>) -> Result<(f64, TnnModel)> {
    if tokens.ncols() < 2 {
        return Err(Error::dim("next-token loss needs at least 2 positions"));
    }
    let (logits, cache) = model.forward_cached(tokens)?;
    let (loss, grad_logits) = next_token_loss(&logits, tokens)?;
    let mut grads = crate::params::zeros_like(model);
    model.backward(&cache, &grad_logits, &mut grads)?;
    Ok((loss, grads))
}

/// Summed loss in nats and number of predictions, without gradients.
pub fn sequence_nats(model: &TnnModel, tokens: ArrayView2<'_, usize>) -> Result<(f64, usize)> {
    let (batch, n) = tokens.dim();
    let logits = model
        .forward(tokens)?
        .into_shape_with_order((batch * n, model.config.vocab_size))
        .expect("contiguous logits");
    let (sum, count, _) = next_token_nats(&logits, tokens)?;
    Ok((sum, count))
}

pub fn model_forward(model: &TnnModel, tokens: ArrayView2<'_, usize>) -> Result<Array3<f64>> {
    model.forward(tokens)
}

impl Parameters for TnnModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array(&self.embedding, &join(prefix, "embedding"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            block.visit_without_tno(&p, f);
            if i == 0 || !self.config.share_rpe {
                block.gtu.tno.visit(&join(&p, "gtu.tno"), f);
            }
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        if let Some(head) = &self.head {
            head.visit(&join(prefix, "head"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array_mut(&mut self.embedding, &join(prefix, "embedding"), f);
        let share = self.config.share_rpe;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            block.visit_without_tno_mut(&p, f);
            if i == 0 || !share {
                block.gtu.tno.visit_mut(&join(&p, "gtu.tno"), f);
            }
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        if let Some(head) = &mut self.head {
            head.visit_mut(&join(prefix, "head"), f);
        }
        if share {
            let source = crate::params::flatten(&self.blocks[0].gtu.tno);
            for block in &mut self.blocks[1..] {
                crate::params::unflatten(&mut block.gtu.tno, &source);
            }
        }
    }
}
