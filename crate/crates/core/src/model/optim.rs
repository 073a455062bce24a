//! Adam with decoupled weight decay, linear warmup then inverse-square-root
//! decay, and optional global-norm clipping.

use ndarray::ArrayView2;

use super::{loss_and_grads, TnnModel};
use crate::error::{Error, Result};
use crate::params::{flatten, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 4000,
            clip_norm: None,
        }
    }
}

/// Learning rate for the 1-based update `step`.
///
/// Rises linearly to `peak_lr` over `warmup_steps`, then decays as
/// `peak_lr * sqrt(warmup / step)`. With no warmup the decay starts at step 1.
pub fn lr_at(cfg: &AdamConfig, step: usize) -> f64 {
    let step = step.max(1) as f64;
    let warmup = cfg.warmup_steps as f64;
    if cfg.warmup_steps > 0 && step <= warmup {
        cfg.peak_lr * step / warmup
    } else {
        cfg.peak_lr * (warmup.max(1.0) / step).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update of `grads` to `model`; returns the learning rate used.
    pub fn update(&mut self, cfg: &AdamConfig, model: &mut TnnModel, grads: &TnnModel) -> f64 {
        let mut grad_tensors = Vec::new();
        grads.visit("", &mut |_, _, data| grad_tensors.push(data.to_vec()));
        if self.m.is_empty() {
            self.m = grad_tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let lr = lr_at(cfg, self.step);
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let mut idx = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, _, params| {
            let (g, m, v) = (&grad_tensors[idx], &mut m_all[idx], &mut v_all[idx]);
            for i in 0..params.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                params[i] -= lr * cfg.weight_decay * params[i];
                params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            idx += 1;
        });
        model.project();
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Loss, backward pass, clipping and one Adam update.
///
/// A non-finite loss or gradient aborts before the model is touched.
pub fn train_step(
    model: &mut TnnModel,
    state: &mut AdamState,
    batch: ArrayView2<'_, usize>,
    cfg: &AdamConfig,
) -> Result<StepMetrics> {
    let (loss, mut grads) = loss_and_grads(model, batch)?;
    let flat = flatten(&grads);
    let grad_norm = norm(&flat);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            loss,
            diagnostics: format!(
                "gradient norm {grad_norm}, parameter norm {}",
                norm(&flatten(model))
            ),
        });
    }
    if let Some(max) = cfg.clip_norm {
        if grad_norm > max {
            let scale = max / grad_norm;
            grads.visit_mut("", &mut |_, _, data| data.iter_mut().for_each(|v| *v *= scale));
        }
    }
    let lr = state.update(cfg, model, &grads);
    Ok(StepMetrics {
        step: state.step,
        loss,
        lr,
        grad_norm,
    })
}
