//! Flat `key = value` run configuration (TOML syntax) with a published
//! schema. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::data::{VocabMode, DEFAULT_VAL_FRACTION};
use crate::error::{Error, Result};
use crate::model::{AdamConfig, ModelConfig};
use crate::nn::{Activation, NormKind};
use crate::rpe::{InputMode, RpeConfig};
use crate::scalar::Precision;
use crate::toeplitz::CirculantStrategy;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub vocab_mode: VocabMode,
    pub val_fraction: f64,

    pub d_model: usize,
    pub gtu_dim: usize,
    pub glu_dim: usize,
    pub layers: usize,
    pub activation: Activation,
    pub norm: NormKind,
    pub decay: f64,
    pub learnable_decay: bool,
    pub causal: bool,
    pub rpe_layers: usize,
    pub rpe_hidden: usize,
    pub rpe_activation: Activation,
    pub rpe_input: InputMode,
    pub share_rpe: bool,
    pub tied_embeddings: bool,
    pub strategy: CirculantStrategy,
    pub precision: Precision,

    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_windows: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk(256);
        Self {
            data: None,
            vocab_mode: VocabMode::Byte,
            val_fraction: DEFAULT_VAL_FRACTION,
            d_model: model.d_model,
            gtu_dim: model.gtu_dim,
            glu_dim: model.glu_dim,
            layers: model.layers,
            activation: model.activation,
            norm: model.norm,
            decay: model.decay,
            learnable_decay: model.learnable_decay,
            causal: model.causal,
            rpe_layers: model.rpe.layers,
            rpe_hidden: model.rpe.hidden_dim,
            rpe_activation: model.rpe.activation,
            rpe_input: model.rpe.input_mode,
            share_rpe: model.share_rpe,
            tied_embeddings: model.tied_embeddings,
            strategy: model.strategy,
            precision: model.precision,
            seq_len: 128,
            batch_size: 8,
            steps: 2000,
            peak_lr: 3e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            eval_every: 200,
            eval_windows: 32,
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

/// One documented key of the run configuration.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: &'static str,
    pub help: &'static str,
}

pub const SCHEMA: &[KeySpec] = &[
    KeySpec { key: "data", kind: "path", help: "training text file" },
    KeySpec { key: "vocab_mode", kind: "byte | char", help: "tokenization" },
    KeySpec { key: "val_fraction", kind: "float in [0, 1)", help: "tail fraction held out for validation" },
    KeySpec { key: "d_model", kind: "int", help: "embedding width" },
    KeySpec { key: "gtu_dim", kind: "int", help: "GTU expansion width, also the TNO channel count" },
    KeySpec { key: "glu_dim", kind: "int", help: "GLU hidden width" },
    KeySpec { key: "layers", kind: "int", help: "number of GTU + GLU blocks" },
    KeySpec { key: "activation", kind: "silu | relu | identity", help: "GTU and GLU activation" },
    KeySpec { key: "norm", kind: "layernorm | rmsnorm", help: "pre-norm type" },
    KeySpec { key: "decay", kind: "float in [0, 1]", help: "decay rate lambda" },
    KeySpec { key: "learnable_decay", kind: "bool", help: "train lambda alongside the weights" },
    KeySpec { key: "causal", kind: "bool", help: "mask negative offsets" },
    KeySpec { key: "rpe_layers", kind: "int >= 2", help: "RPE dense layers, output layer included" },
    KeySpec { key: "rpe_hidden", kind: "int", help: "RPE hidden width" },
    KeySpec { key: "rpe_activation", kind: "silu | relu | identity", help: "RPE hidden activation" },
    KeySpec { key: "rpe_input", kind: "raw_integer | normalized | sincos", help: "RPE input encoding" },
    KeySpec { key: "share_rpe", kind: "bool", help: "one RPE for all blocks" },
    KeySpec { key: "tied_embeddings", kind: "bool", help: "reuse the embedding as output head" },
    KeySpec { key: "strategy", kind: "padded_pow2 | paper_2n", help: "circulant embedding size" },
    KeySpec { key: "precision", kind: "f64 | f32", help: "Toeplitz product precision" },
    KeySpec { key: "seq_len", kind: "int >= 2", help: "training window length" },
    KeySpec { key: "batch_size", kind: "int", help: "windows per step" },
    KeySpec { key: "steps", kind: "int", help: "optimizer steps" },
    KeySpec { key: "peak_lr", kind: "float", help: "peak learning rate" },
    KeySpec { key: "warmup_steps", kind: "int", help: "linear warmup steps" },
    KeySpec { key: "beta1", kind: "float", help: "Adam first moment decay" },
    KeySpec { key: "beta2", kind: "float", help: "Adam second moment decay" },
    KeySpec { key: "adam_eps", kind: "float", help: "Adam epsilon" },
    KeySpec { key: "weight_decay", kind: "float", help: "decoupled weight decay" },
    KeySpec { key: "clip_norm", kind: "float", help: "global gradient norm limit, 0 disables" },
    KeySpec { key: "eval_every", kind: "int", help: "steps between validation passes, 0 for final only" },
    KeySpec { key: "eval_windows", kind: "int", help: "validation windows per pass, 0 for all" },
    KeySpec { key: "seed", kind: "int", help: "seed for initialization and batch sampling" },
    KeySpec { key: "out_dir", kind: "path", help: "directory for checkpoint and metrics" },
];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        // Relative data and output paths resolve against the config's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(data) = &config.data {
            config.data = Some(base.join(data));
        }
        config.out_dir = base.join(&config.out_dir);
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (key, v) in [
            ("peak_lr", self.peak_lr),
            ("adam_eps", self.adam_eps),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be a finite non-negative number")));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{key} {v} not in [0, 1)")));
            }
        }
        self.model_config(256)?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let config = ModelConfig {
            vocab_size,
            d_model: self.d_model,
            gtu_dim: self.gtu_dim,
            glu_dim: self.glu_dim,
            layers: self.layers,
            activation: self.activation,
            norm: self.norm,
            decay: self.decay,
            learnable_decay: self.learnable_decay,
            causal: self.causal,
            rpe: RpeConfig {
                layers: self.rpe_layers,
                hidden_dim: self.rpe_hidden,
                out_dim: self.gtu_dim,
                activation: self.rpe_activation,
                input_mode: self.rpe_input,
            },
            share_rpe: self.share_rpe,
            tied_embeddings: self.tied_embeddings,
            strategy: self.strategy,
            precision: self.precision,
        };
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}
