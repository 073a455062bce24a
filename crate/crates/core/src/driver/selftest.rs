use std::path::PathBuf;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bench::{run_bench, write_bench_csv, BenchConfig, BenchMethod};
use super::dump::{dump_toeplitz, write_matrix_csv};
use super::train::{extrapolate, train, write_extrapolation_csv};
use crate::check::{gradient_errors, max_rel_err, random_array};
use crate::config::RunConfig;
use crate::data::{synthetic_text, Corpus, VocabMode};
use crate::equivalence::{
    alibi_decay, alibi_weight, conv_to_toeplitz, conv_via_toeplitz, decayed_weight, direct_convolution, pad_input,
    ssm_recurrence, ssm_to_toeplitz, ssm_via_toeplitz, ConvKernel, StateSpaceParams,
};
use crate::error::Result;
use crate::model::checkpoint::{decode, encode};
use crate::model::{loss_and_grads, next_token_loss, CheckpointMeta, ModelConfig, TnnModel};
use crate::params::param_count;
use crate::rpe::{RpeConfig, RpeNet};
use crate::tno::{tno_backward, write_coeffs_csv, ToeplitzOperator};
use crate::toeplitz::{
    build_circulant, fft_matvec, fft_matvec_batch, matvec_backward, naive_matvec, CirculantStrategy, RelPosCoefficients,
};

/// Deliberate corruption of one kernel path, used to show that the
/// self-test notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FftPaper2n,
    FftPow2,
}

impl std::str::FromStr for Fault {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fft_paper2n" => Ok(Fault::FftPaper2n),
            "fft_pow2" => Ok(Fault::FftPow2),
            _ => Err(format!("unknown fault {s:?}; expected fft_paper2n or fft_pow2")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    pub fault: Option<Fault>,
    /// Leaves out the wall-clock scaling property.
    pub skip_timing: bool,
    pub seed: u64,
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn at_most(label: &str, value: f64, limit: f64) -> Outcome {
    Outcome {
        passed: value <= limit,
        detail: format!("{label} {value:.3e} (limit {limit:.0e})"),
    }
}

fn holds(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn strategies() -> [CirculantStrategy; 2] {
    CirculantStrategy::ALL
}

/// Kernel path under test, optionally corrupted.
fn kernel(coeffs: &RelPosCoefficients, x: &Array2<f64>, strategy: CirculantStrategy, fault: Option<Fault>) -> Result<Array2<f64>> {
    let mut y = fft_matvec(coeffs, x.view(), strategy)?;
    let hit = matches!(
        (fault, strategy),
        (Some(Fault::FftPaper2n), CirculantStrategy::Paper2n) | (Some(Fault::FftPow2), CirculantStrategy::PaddedPow2)
    );
    if hit {
        let n = y.nrows();
        y[[n - 1, 0]] += 1e-6 * (1.0 + y[[n - 1, 0]].abs());
    }
    Ok(y)
}

fn random_coeffs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<RelPosCoefficients> {
    RelPosCoefficients::new(n, random_array(rng, (2 * n - 1, d)))
}

fn worst(errs: &[(String, f64)]) -> (String, f64) {
    errs.iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

fn kernel_oracle(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<Outcome> {
    let mut err = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=512);
        let d = rng.random_range(1..=8);
        let c = random_coeffs(rng, n, d)?;
        let x = random_array(rng, (n, d));
        let expected = naive_matvec(&c, x.view())?;
        for s in strategies() {
            err = err.max(max_rel_err(&kernel(&c, &x, s, fault)?, &expected));
        }
    }
    Ok(at_most("max rel err", err, 1e-9))
}

fn kernel_oracle_f32(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut err = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=512);
        let d = rng.random_range(1..=4);
        let c = random_coeffs(rng, n, d)?.cast::<f32>();
        let x = random_array::<_, _, ndarray::Ix2>(rng, (n, d)).mapv(|v| v as f32);
        let expected = naive_matvec(&c, x.view())?.mapv(f64::from);
        for s in strategies() {
            err = err.max(max_rel_err(&fft_matvec(&c, x.view(), s)?.mapv(f64::from), &expected));
        }
    }
    Ok(at_most("max rel err", err, 1e-4))
}

fn linearity(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=200);
        let c = random_coeffs(rng, n, 3)?;
        let x: Array2<f64> = random_array(rng, (n, 3));
        let z: Array2<f64> = random_array(rng, (n, 3));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        for s in strategies() {
            let lhs = fft_matvec(&c, (&x * a + &z * b).view(), s)?;
            let rhs = fft_matvec(&c, x.view(), s)? * a + fft_matvec(&c, z.view(), s)? * b;
            err = err.max(max_rel_err(&lhs, &rhs));
        }
    }
    Ok(at_most("max rel err", err, 1e-10))
}

fn embedding_round_trip(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    for n in [1, 2, 3, 7, 16, 33] {
        let c = random_coeffs(rng, n, 2)?;
        for s in strategies() {
            let spec = build_circulant(&c, s)?;
            for ch in 0..2 {
                if spec.top_left_block(n, ch) != c.to_dense(ch) {
                    return Ok(holds(false, format!("block differs at n={n}, {}", s.name())));
                }
            }
        }
    }
    Ok(holds(true, "top-left blocks bit-equal"))
}

fn adjoint(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..=300);
        let c = random_coeffs(rng, n, 1)?;
        let x: Array2<f64> = random_array(rng, (n, 1));
        let g: Array2<f64> = random_array(rng, (n, 1));
        for s in strategies() {
            let lhs = (&fft_matvec(&c, x.view(), s)? * &g).sum();
            let rhs = (&x * &fft_matvec(&c.reversed(), g.view(), s)?).sum();
            err = err.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
        }
    }
    Ok(at_most("max rel err", err, 1e-10))
}

fn kernel_gradients(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let n = 9;
    let c = random_coeffs(rng, n, 2)?;
    let x: Array2<f64> = random_array(rng, (n, 2));
    let g: Array2<f64> = random_array(rng, (n, 2));
    let mut err = 0.0f64;
    for s in strategies() {
        let (gx, gc) = matvec_backward(&c, x.view(), g.view(), s)?;
        let h = 1e-6;
        for idx in ndarray::indices((n, 2)) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let fd = ((&naive_matvec(&c, xp.view())? * &g).sum() - (&naive_matvec(&c, xm.view())? * &g).sum()) / (2.0 * h);
            err = err.max((fd - gx[idx]).abs() / fd.abs().max(1e-6));
        }
        for idx in ndarray::indices((2 * n - 1, 2)) {
            let (mut cp, mut cm) = (c.values().clone(), c.values().clone());
            cp[idx] += h;
            cm[idx] -= h;
            let f = |v: Array2<f64>| -> Result<f64> {
                Ok((&naive_matvec(&RelPosCoefficients::new(n, v)?, x.view())? * &g).sum())
            };
            let fd = (f(cp)? - f(cm)?) / (2.0 * h);
            err = err.max((fd - gc.values()[idx]).abs() / fd.abs().max(1e-6));
        }
    }
    Ok(at_most("max rel err", err, 1e-6))
}

fn scaling(opts: &SelftestOptions) -> Result<Outcome> {
    if opts.skip_timing {
        return Ok(holds(true, "skipped"));
    }
    let fft = run_bench(&BenchConfig {
        min_n: 1024,
        max_n: 8192,
        d: 16,
        trials: 9,
        methods: vec![BenchMethod::FftPow2],
        ..BenchConfig::default()
    })?;
    let naive = run_bench(&BenchConfig {
        min_n: 256,
        max_n: 1024,
        d: 16,
        trials: 7,
        methods: vec![BenchMethod::Naive],
        ..BenchConfig::default()
    })?;
    let max_fft = fft.iter().filter_map(|r| r.doubling_ratio).fold(0.0, f64::max);
    let min_naive = naive.iter().filter_map(|r| r.doubling_ratio).fold(f64::INFINITY, f64::min);
    Ok(holds(
        max_fft <= 2.6 && min_naive >= 3.5,
        format!("fft doubling <= {max_fft:.2} (limit 2.6), naive >= {min_naive:.2} (limit 3.5)"),
    ))
}

fn rpe_config(out: usize) -> RpeConfig {
    RpeConfig {
        layers: 3,
        hidden_dim: 8,
        ..RpeConfig::paper(out)
    }
}

fn rpe_length_independence(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let net = RpeNet::new(rpe_config(3), rng)?;
    let short = net.forward(10)?;
    let long = net.forward(37)?;
    let same = (-9..=9).all(|k| short.offset_row(k) == long.offset_row(k));
    Ok(holds(same, "shared offsets bit-equal at n=10 and n=37"))
}

fn rpe_param_count() -> Result<Outcome> {
    let config = rpe_config(5);
    let net = RpeNet::zeros(config.clone())?;
    let counted = param_count(&net);
    let ok = counted == config.param_count() && (1..50).all(|n| net.forward(n).is_ok()) && param_count(&net) == counted;
    Ok(holds(ok, format!("{counted} parameters for every n")))
}

fn rpe_gradients(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut config = rpe_config(3);
    config.activation = crate::nn::Activation::Silu;
    let net = RpeNet::new(config, rng)?;
    let n = 7;
    let g: Array2<f64> = random_array(rng, (2 * n - 1, 3));
    let gc = RelPosCoefficients::new(n, g.clone())?;
    let analytic = crate::rpe::rpe_backward(&net, n, &gc)?;
    let errs = gradient_errors(&net, &analytic, 1e-6, 1e-6, |p| (p.forward(n).unwrap().values() * &g).sum());
    let (name, err) = worst(&errs);
    Ok(at_most(&format!("worst tensor {name}"), err, 1e-5))
}

fn rpe_determinism(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let net = RpeNet::new(rpe_config(4), rng)?;
    Ok(holds(net.forward(20)? == net.clone().forward(20)?, "repeated tables bit-equal"))
}

fn tno(rng: &mut ChaCha8Rng, causal: bool, channels: usize, decay: f64) -> Result<ToeplitzOperator> {
    ToeplitzOperator::new(RpeNet::new(rpe_config(channels), rng)?, decay, causal)
}

fn tno_causality(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let op = tno(rng, true, 3, 0.95)?;
    let n = 40;
    let x: Array3<f64> = random_array(rng, (1, n, 3));
    let y = op.forward(x.view())?;
    for _ in 0..20 {
        let cut = rng.random_range(0..n - 1);
        let mut x2 = x.clone();
        x2.slice_mut(s![.., cut + 1.., ..]).mapv_inplace(|v| v + rng.random_range(-1.0..1.0));
        let y2 = op.forward(x2.view())?;
        if y.slice(s![.., ..=cut, ..]) != y2.slice(s![.., ..=cut, ..]) {
            return Ok(holds(false, format!("prefix changed at cut {cut}")));
        }
    }
    Ok(holds(true, "20 suffix perturbations, prefixes bit-equal"))
}

fn tno_decay_envelope(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let lambda = 0.93;
    let op = tno(rng, false, 2, lambda)?;
    let c = op.unit_rpe_coeffs(64)?;
    let lambda = std::hint::black_box(lambda);
    let exact = (-63..=63isize).all(|k| (0..2).all(|ch| c.get(k, ch) == lambda.powi(k.unsigned_abs() as i32)));
    let monotone = (0..63isize).all(|k| c.get(k + 1, 0).abs() <= c.get(k, 0).abs());
    Ok(holds(exact && monotone, "|t_k| = lambda^|k| exactly, non-increasing"))
}

fn alibi(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let s = rng.random_range(-4.0..4.0);
        let m = rng.random_range(-1.0..=0.0);
        let lambda = alibi_decay(m)?;
        for k in 0..64isize {
            let a = alibi_weight(s, m, k);
            err = err.max((decayed_weight(s, lambda, k) - a).abs() / a);
        }
    }
    Ok(at_most("max rel err", err, 1e-12))
}

fn tno_batch_consistency(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    for causal in [false, true] {
        let op = tno(rng, causal, 3, 0.9)?;
        let x: Array3<f64> = random_array(rng, (4, 21, 3));
        let y = op.forward(x.view())?;
        for b in 0..4 {
            let single = op.forward(x.slice(s![b..b + 1, .., ..]))?;
            if single.index_axis(Axis(0), 0) != y.index_axis(Axis(0), b) {
                return Ok(holds(false, format!("item {b} differs (causal {causal})")));
            }
        }
    }
    Ok(holds(true, "batched and single items bit-equal"))
}

fn tno_gradients(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut worst_err = (String::new(), 0.0);
    for causal in [false, true] {
        let mut config = rpe_config(2);
        config.activation = crate::nn::Activation::Silu;
        let op = ToeplitzOperator::new(RpeNet::new(config, rng)?, 0.8, causal)?.with_learnable_decay(true);
        let x: Array3<f64> = random_array(rng, (1, 12, 2));
        let g: Array3<f64> = random_array(rng, (1, 12, 2));
        let (_, analytic) = tno_backward(&op, x.view(), g.view())?;
        let errs = gradient_errors(&op, &analytic, 1e-6, 1e-6, |p| (p.forward(x.view()).unwrap() * &g).sum());
        let w = worst(&errs);
        if w.1 >= worst_err.1 {
            worst_err = w;
        }
    }
    Ok(at_most(&format!("worst tensor {}", worst_err.0), worst_err.1, 1e-5))
}

fn tiny_model(rng: &mut ChaCha8Rng, causal: bool) -> Result<TnnModel> {
    let mut config = ModelConfig::tiny(5);
    config.causal = causal;
    TnnModel::new(config, rng)
}

fn model_gradients(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let model = tiny_model(rng, true)?;
    let tokens = Array2::from_shape_fn((2, 6), |_| rng.random_range(0..5));
    let (_, analytic) = loss_and_grads(&model, tokens.view())?;
    let errs = gradient_errors(&model, &analytic, 1e-5, 1e-7, |m| {
        let (logits, _) = m.forward_cached(tokens.view()).unwrap();
        next_token_loss(&logits, tokens.view()).unwrap().0
    });
    let (name, err) = worst(&errs);
    Ok(at_most(&format!("{} tensors, worst {name}", errs.len()), err, 1e-4))
}

fn model_causality(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let model = tiny_model(rng, true)?;
    let n = 24;
    let tokens = Array2::from_shape_fn((1, n), |_| rng.random_range(0..5));
    let logits = model.forward(tokens.view())?;
    for _ in 0..20 {
        let cut = rng.random_range(0..n - 1);
        let mut other = tokens.clone();
        other.slice_mut(s![.., cut + 1..]).mapv_inplace(|t| (t + rng.random_range(1..5)) % 5);
        if model.forward(other.view())?.slice(s![.., ..=cut, ..]) != logits.slice(s![.., ..=cut, ..]) {
            return Ok(holds(false, format!("prefix logits changed at cut {cut}")));
        }
    }
    Ok(holds(true, "20 suffix perturbations, prefix logits bit-equal"))
}

fn variable_length(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let model = tiny_model(rng, true)?;
    let before = crate::params::flatten(&model);
    let stream: Vec<usize> = (0..100).map(|_| rng.random_range(0..5)).collect();
    let full = model.forward(Array2::from_shape_vec((1, 100), stream.clone()).unwrap().view())?;
    for n in [1, 2, 5, 17, 64, 99] {
        let part = model.forward(Array2::from_shape_vec((1, n), stream[..n].to_vec()).unwrap().view())?;
        if part != full.slice(s![.., ..n, ..]) {
            return Ok(holds(false, format!("prefix logits differ at n={n}")));
        }
    }
    Ok(holds(crate::params::flatten(&model) == before, "lengths 1..100 share prefix logits bit-equal"))
}

fn model_param_count() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for config in [ModelConfig::tiny(5), ModelConfig::desk(256)] {
        for (tied, shared) in [(false, false), (true, true)] {
            let c = ModelConfig {
                tied_embeddings: tied,
                share_rpe: shared,
                ..config.clone()
            };
            let model = TnnModel::new(c.clone(), &mut rng)?;
            if model.param_count() != c.param_count() {
                return Ok(holds(false, format!("formula {} vs counted {}", c.param_count(), model.param_count())));
            }
        }
    }
    Ok(holds(true, "formula equals counted tensors; no length term"))
}

fn cnn(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=8);
        let n = rng.random_range(1..=64);
        let kernel = ConvKernel::new(random_array(rng, m))?;
        let x: Array1<f64> = random_array(rng, n);
        let expected = direct_convolution(kernel.taps(), x.view());
        let z = pad_input(x.view(), m).insert_axis(Axis(1));
        let y = naive_matvec(&conv_to_toeplitz(&kernel, n)?, z.view())?.remove_axis(Axis(1));
        err = err.max(max_rel_err(&y, &expected));
    }
    Ok(at_most("max rel err", err, 1e-12))
}

fn ssm(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut err = 0.0f64;
    for _ in 0..100 {
        let h = rng.random_range(1..=4);
        let n = rng.random_range(1..=128);
        let p = StateSpaceParams::random_stable(rng, h, 0.9)?;
        let x: Array1<f64> = random_array(rng, n);
        let expected = ssm_recurrence(&p, x.view());
        let y = naive_matvec(&ssm_to_toeplitz(&p, n)?, x.view().insert_axis(Axis(1)))?.remove_axis(Axis(1));
        err = err.max(max_rel_err(&y, &expected));
    }
    Ok(at_most("max rel err", err, 1e-10))
}

fn equivalence_fast_kernel(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let (mut conv_err, mut ssm_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (m, n, h, len) = (
            rng.random_range(1..=8),
            rng.random_range(1..=64),
            rng.random_range(1..=4),
            rng.random_range(1..=128),
        );
        let kernel = ConvKernel::new(random_array(rng, m))?;
        let x: Array1<f64> = random_array(rng, n);
        let p = StateSpaceParams::random_stable(rng, h, 0.9)?;
        let u: Array1<f64> = random_array(rng, len);
        for s in strategies() {
            conv_err = conv_err.max(max_rel_err(
                &conv_via_toeplitz(&kernel, x.view(), s)?,
                &direct_convolution(kernel.taps(), x.view()),
            ));
            ssm_err = ssm_err.max(max_rel_err(&ssm_via_toeplitz(&p, u.view(), s)?, &ssm_recurrence(&p, u.view())));
        }
    }
    Ok(holds(
        conv_err <= 1e-12 && ssm_err <= 1e-10,
        format!("conv {conv_err:.3e} (limit 1e-12), state space {ssm_err:.3e} (limit 1e-10)"),
    ))
}

fn checkpoint_round_trip(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let mut config = ModelConfig::tiny(5);
    config.learnable_decay = true;
    let model = TnnModel::new(config, rng)?;
    let meta = CheckpointMeta {
        seed: 1,
        train_seq_len: 6,
        vocab: crate::data::Vocab::Byte,
        steps: 0,
    };
    let bytes = encode(&model, &meta)?;
    let loaded = decode(&bytes)?;
    let tokens = Array2::from_shape_fn((2, 9), |_| rng.random_range(0..5));
    let same_bytes = encode(&loaded.model, &loaded.meta)? == bytes;
    let same_logits = loaded.model.forward(tokens.view())? == model.forward(tokens.view())?;
    let truncated = decode(&bytes[..bytes.len() - 3]).is_err();
    Ok(holds(
        same_bytes && same_logits && truncated,
        format!("re-save identical {same_bytes}, logits bit-equal {same_logits}, truncation detected {truncated}"),
    ))
}

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Result<Self> {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let dir = std::env::temp_dir().join(format!("tnn-selftest-{}-{tag}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| crate::Error::io(&dir, e))?;
        Ok(Self(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn tiny_run(out: PathBuf, seed: u64) -> RunConfig {
    RunConfig {
        d_model: 8,
        gtu_dim: 8,
        glu_dim: 8,
        layers: 1,
        rpe_hidden: 8,
        seq_len: 16,
        batch_size: 2,
        steps: 4,
        eval_every: 2,
        eval_windows: 2,
        seed,
        out_dir: out,
        ..RunConfig::default()
    }
}

fn run_determinism(seed: u64) -> Result<Outcome> {
    let corpus = Corpus::from_bytes(synthetic_text(seed, 3000).as_bytes(), VocabMode::Byte, 0.2)?;
    let a = Scratch::new("a")?;
    let b = Scratch::new("b")?;
    let first = train(&tiny_run(a.0.clone(), seed), &corpus, true)?;
    let second = train(&tiny_run(b.0.clone(), seed), &corpus, true)?;
    let read = |p: &PathBuf| std::fs::read(p).map_err(|e| crate::Error::io(p, e));
    let logs = read(&first.metrics)? == read(&second.metrics)?;
    let ckpts = read(&first.checkpoint)? == read(&second.checkpoint)?;
    let rows_a = extrapolate(&first.model, &corpus.val, &[16, 32], None)?;
    let rows_b = extrapolate(&second.model, &corpus.val, &[16, 32], None)?;
    Ok(holds(
        logs && ckpts && rows_a == rows_b,
        format!("metrics identical {logs}, checkpoints identical {ckpts}, extrapolation identical {}", rows_a == rows_b),
    ))
}

fn bench_gate() -> Result<Outcome> {
    let records = run_bench(&BenchConfig {
        min_n: 16,
        max_n: 32,
        d: 2,
        trials: 5,
        warmup: 0,
        corrupt: Some(BenchMethod::FftPow2),
        ..BenchConfig::default()
    })?;
    let gated = records
        .iter()
        .filter(|r| r.method == "fft_pow2")
        .all(|r| r.status == "failed" && r.median_seconds.is_none());
    let others = records
        .iter()
        .filter(|r| r.method != "fft_pow2")
        .all(|r| r.status == "ok" && r.median_seconds.is_some());
    Ok(holds(gated && others, "corrupted method reported failed without timing"))
}

fn csv_schema(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let header = |bytes: Vec<u8>| String::from_utf8(bytes).ok().and_then(|t| t.lines().next().map(str::to_owned));
    let mut bench = Vec::new();
    write_bench_csv(&[], &mut bench).expect("in-memory write");
    let mut extra = Vec::new();
    write_extrapolation_csv(&[], &mut extra).expect("in-memory write");
    let model = tiny_model(rng, true)?;
    let dump = dump_toeplitz(&model, 0, 3, false)?;
    let mut matrix = Vec::new();
    write_matrix_csv(&dump.matrix, &mut matrix).expect("in-memory write");
    let mut coeffs = Vec::new();
    write_coeffs_csv(&dump.coeffs, &mut coeffs).expect("in-memory write");
    let got = [header(bench), header(extra), header(matrix), header(coeffs)];
    let want = [
        "method,n,d,trials,median_seconds,doubling_ratio,checksum,status",
        "length,loss,perplexity,tokens_evaluated",
        "row,0,1,2",
        "offset,channel,value",
    ];
    let ok = got.iter().zip(want).all(|(g, w)| g.as_deref() == Some(w));
    Ok(holds(ok, "bench, extrapolation, matrix and coefficient headers fixed"))
}

/// Batched causal product agrees with the batch-free FFT path.
fn causal_kernel_agrees(rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let op = tno(rng, true, 4, 0.97)?;
    let x: Array3<f64> = random_array(rng, (2, 300, 4));
    let y = op.forward(x.view())?;
    let coeffs = op.effective_coeffs(300)?;
    let reference = fft_matvec_batch(&coeffs, x.view(), CirculantStrategy::PaddedPow2)?;
    Ok(at_most("max rel err", max_rel_err(&y, &reference), 1e-10))
}

type Property<'a> = (&'static str, Box<dyn FnOnce(&mut ChaCha8Rng) -> Result<Outcome> + 'a>);

/// Runs every property in a fixed order. Failures are results, not errors.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<PropertyResult> {
    let fault = opts.fault;
    let properties: Vec<Property> = vec![
        ("kernel.oracle_f64", Box::new(move |r| kernel_oracle(r, fault))),
        ("kernel.oracle_f32", Box::new(kernel_oracle_f32)),
        ("kernel.linearity", Box::new(linearity)),
        ("kernel.embedding_round_trip", Box::new(embedding_round_trip)),
        ("kernel.adjoint", Box::new(adjoint)),
        ("kernel.gradients", Box::new(kernel_gradients)),
        ("kernel.scaling", Box::new(|_| scaling(opts))),
        ("rpe.length_independence", Box::new(rpe_length_independence)),
        ("rpe.param_count", Box::new(|_| rpe_param_count())),
        ("rpe.gradients", Box::new(rpe_gradients)),
        ("rpe.determinism", Box::new(rpe_determinism)),
        ("tno.causality", Box::new(tno_causality)),
        ("tno.causal_kernel", Box::new(causal_kernel_agrees)),
        ("tno.decay_envelope", Box::new(tno_decay_envelope)),
        ("tno.alibi", Box::new(alibi)),
        ("tno.batch_consistency", Box::new(tno_batch_consistency)),
        ("tno.gradients", Box::new(tno_gradients)),
        ("model.gradients", Box::new(model_gradients)),
        ("model.causality", Box::new(model_causality)),
        ("model.variable_length", Box::new(variable_length)),
        ("model.param_count", Box::new(|_| model_param_count())),
        ("equivalence.cnn", Box::new(cnn)),
        ("equivalence.ssm", Box::new(ssm)),
        ("equivalence.fast_kernel", Box::new(equivalence_fast_kernel)),
        ("checkpoint.round_trip", Box::new(checkpoint_round_trip)),
        ("cli.determinism", Box::new(|_| run_determinism(opts.seed))),
        ("cli.bench_gate", Box::new(|_| bench_gate())),
        ("cli.csv_schema", Box::new(csv_schema)),
    ];
    properties
        .into_iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(i as u64));
            let start = Instant::now();
            let outcome = check(&mut rng).unwrap_or_else(|e| holds(false, format!("error: {e}")));
            PropertyResult {
                name,
                passed: outcome.passed,
                detail: outcome.detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

/// Fixed-width table, one property per line.
pub fn format_report(results: &[PropertyResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0).max("property".len());
    let mut out = format!("{:<width$}  status  {:>8}  detail\n", "property", "seconds");
    for r in results {
        out.push_str(&format!(
            "{:<width$}  {:<6}  {:>8.2}  {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        ));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} properties, {failed} failed\n", results.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: Option<Fault>) -> Vec<PropertyResult> {
        run_selftest(&SelftestOptions {
            fault,
            skip_timing: true,
            seed: 0,
        })
    }

    #[test]
    fn clean_build_passes_everything() {
        let results = quick(None);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{}", format_report(&results));
    }

    #[test]
    fn injected_fault_fails_only_its_property() {
        for fault in [Fault::FftPow2, Fault::FftPaper2n] {
            let results = quick(Some(fault));
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            assert_eq!(failed, ["kernel.oracle_f64"], "{fault:?}");
        }
    }

    #[test]
    fn fault_names_parse() {
        assert_eq!("fft_pow2".parse::<Fault>().unwrap(), Fault::FftPow2);
        assert!("other".parse::<Fault>().is_err());
    }

    #[test]
    fn report_has_one_line_per_property() {
        let results = vec![PropertyResult {
            name: "a.b",
            passed: false,
            detail: "x".into(),
            seconds: 0.5,
        }];
        let report = format_report(&results);
        assert!(report.contains("a.b       FAIL        0.50  x"), "{report}");
        assert!(report.ends_with("1 properties, 1 failed\n"));
    }
}
