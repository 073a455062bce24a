use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{eval_windows, sample_batch, unigram_cross_entropy, Corpus};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, sequence_nats, train_step, AdamState, CheckpointMeta, TnnModel};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    /// `train` or `val`.
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TnnModel,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_val_loss: Option<f64>,
    pub unigram_val_nats: f64,
}

/// Mean next-token loss over windows of one length.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EvalResult {
    pub length: usize,
    pub loss: f64,
    pub perplexity: f64,
    pub tokens_evaluated: usize,
}

/// Token budget per forward pass during evaluation.
const EVAL_CHUNK_TOKENS: usize = 8192;

/// Mean next-token loss over consecutive non-overlapping windows of `len`
/// tokens, at most `max_windows` of them.
pub fn evaluate(model: &TnnModel, tokens: &[usize], len: usize, max_windows: Option<usize>) -> Result<EvalResult> {
    if len < 2 {
        return Err(Error::dim(format!("evaluation length {len} is below 2")));
    }
    let windows = eval_windows(tokens, len, max_windows);
    if windows.is_empty() {
        return Err(Error::Corpus(format!(
            "{} tokens do not fill one window of length {len}",
            tokens.len()
        )));
    }
    let per_chunk = (EVAL_CHUNK_TOKENS / len).max(1);
    let (mut nats, mut count) = (0.0, 0);
    for chunk in windows.chunks(per_chunk) {
        let batch = Array2::from_shape_fn((chunk.len(), len), |(b, i)| chunk[b][i]);
        let (s, c) = sequence_nats(model, batch.view())?;
        nats += s;
        count += c;
    }
    let loss = nats / count as f64;
    Ok(EvalResult {
        length: len,
        loss,
        perplexity: loss.exp(),
        tokens_evaluated: count,
    })
}

/// [`evaluate`] at each length, in the order given.
///
/// With `max_tokens`, each length sees at most that many tokens of windows.
pub fn extrapolate(model: &TnnModel, tokens: &[usize], lengths: &[usize], max_tokens: Option<usize>) -> Result<Vec<EvalResult>> {
    if !model.config.causal {
        return Err(Error::Config("extrapolation needs a causal model".into()));
    }
    lengths
        .iter()
        .map(|&len| evaluate(model, tokens, len, max_tokens.map(|t| (t / len).max(1))))
        .collect()
}

pub fn write_extrapolation_csv<W: Write>(rows: &[EvalResult], mut out: W) -> std::io::Result<()> {
    writeln!(out, "length,loss,perplexity,tokens_evaluated")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.length, r.loss, r.perplexity, r.tokens_evaluated)?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Trains a fresh model on `corpus` and writes checkpoint, metrics log and
/// the effective configuration into `config.out_dir`.
///
/// Validation runs every `eval_every` steps and after the last step. With
/// `deterministic`, wall-clock fields are written as zero so that two runs
/// produce identical logs. A non-finite loss aborts the run; the checkpoint
/// then holds the last good parameters.
pub fn train(config: &RunConfig, corpus: &Corpus, deterministic: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let model_config = config.model_config(corpus.vocab.size())?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    std::fs::write(out.join(CONFIG_FILE), config.to_toml()).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;
    let mut metrics = create(&metrics_path)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = TnnModel::new(model_config, &mut rng)?;
    let mut state = AdamState::new();
    let adam = config.adam();
    let start = Instant::now();
    let eval_limit = (config.eval_windows > 0).then_some(config.eval_windows);
    let mut meta = CheckpointMeta {
        seed: config.seed,
        train_seq_len: config.seq_len,
        vocab: corpus.vocab.clone(),
        steps: 0,
    };
    let log = |metrics: &mut dyn Write, step: usize, split: &str, loss: f64, lr: f64| -> Result<()> {
        let line = MetricsLine {
            step,
            split: split.into(),
            loss,
            lr,
            wall_seconds: if deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
        };
        writeln!(metrics, "{}", serde_json::to_string(&line).expect("metrics serialize"))
            .map_err(|e| Error::io(&metrics_path, e))
    };

    let mut final_val_loss = None;
    for step in 1..=config.steps {
        let batch = sample_batch(&mut rng, &corpus.train, config.batch_size, config.seq_len)?;
        let result = train_step(&mut model, &mut state, batch.view(), &adam);
        let m = match result {
            Ok(m) => m,
            Err(e @ (Error::NonFiniteLoss { .. } | Error::Numeric(_))) => {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                save_checkpoint(&model, &meta, &checkpoint)?;
                return Err(match e {
                    Error::Numeric(msg) => Error::NonFiniteLoss {
                        step,
                        loss: f64::NAN,
                        diagnostics: msg,
                    },
                    e => e,
                });
            }
            Err(e) => return Err(e),
        };
        meta.steps = step;
        log(&mut metrics, step, "train", m.loss, m.lr)?;
        if step == config.steps || (config.eval_every > 0 && step % config.eval_every == 0) {
            let val = evaluate(&model, &corpus.val, config.seq_len, eval_limit)?;
            log(&mut metrics, step, "val", val.loss, m.lr)?;
            final_val_loss = Some(val.loss);
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    save_checkpoint(&model, &meta, &checkpoint)?;
    Ok(TrainOutcome {
        model,
        checkpoint,
        metrics: metrics_path,
        final_val_loss,
        unigram_val_nats: unigram_cross_entropy(&corpus.train, &corpus.val, corpus.vocab.size()),
    })
}
