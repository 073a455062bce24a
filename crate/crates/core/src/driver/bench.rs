use std::io::Write;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::check::{max_rel_err, random_array};
use crate::error::{Error, Result};
use crate::toeplitz::{fft_matvec, naive_matvec, CirculantStrategy, RelPosCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    Naive,
    FftPaper2n,
    FftPow2,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 3] = [BenchMethod::Naive, BenchMethod::FftPaper2n, BenchMethod::FftPow2];

    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Naive => "naive",
            BenchMethod::FftPaper2n => "fft_paper2n",
            BenchMethod::FftPow2 => "fft_pow2",
        }
    }

    fn run(self, coeffs: &RelPosCoefficients, x: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            BenchMethod::Naive => naive_matvec(coeffs, x.view()),
            BenchMethod::FftPaper2n => fft_matvec(coeffs, x.view(), CirculantStrategy::Paper2n),
            BenchMethod::FftPow2 => fft_matvec(coeffs, x.view(), CirculantStrategy::PaddedPow2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub min_n: usize,
    pub max_n: usize,
    pub d: usize,
    pub trials: usize,
    /// Untimed runs before the timed trials.
    pub warmup: usize,
    /// Largest n at which the naive method is timed; larger sizes are
    /// recorded as skipped.
    pub naive_max_n: usize,
    /// Largest working set, in bytes, any single run may need.
    pub memory_limit: usize,
    pub methods: Vec<BenchMethod>,
    pub seed: u64,
    /// Perturbs one method's output before verification (self-test only).
    pub corrupt: Option<BenchMethod>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            min_n: 512,
            max_n: 16384,
            d: 64,
            trials: 20,
            warmup: 2,
            naive_max_n: 4096,
            memory_limit: 1 << 32,
            methods: BenchMethod::ALL.to_vec(),
            seed: 0,
            corrupt: None,
        }
    }
}

/// One timing row. Fields other than method, n, d and status are absent when
/// the method was skipped or failed verification.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub method: &'static str,
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    pub median_seconds: Option<f64>,
    /// Median at `n` over median at `n / 2` for the same method.
    pub doubling_ratio: Option<f64>,
    /// Sum of all output entries.
    pub checksum: Option<f64>,
    /// `ok`, `skipped` or `failed`.
    pub status: &'static str,
}

/// Relative tolerance of the verification against the naive product.
pub const VERIFY_TOL: f64 = 1e-9;
/// Channels the naive oracle checks when the full product is too slow.
const ORACLE_CHANNELS: usize = 2;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn working_set(method: BenchMethod, n: usize, d: usize) -> usize {
    let floats = match method {
        BenchMethod::Naive => 4 * n * d,
        // complex spectra of coefficients and input plus the output
        _ => 2 * 2 * (2 * n).next_power_of_two() * d * 2 + 4 * n * d,
    };
    floats * 8
}

/// Geometric sweep `min_n, 2 min_n, ...` up to `max_n`.
///
/// Each method's output is checked against the naive product once per size
/// before it is timed; a method that fails the check gets no timing.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.min_n < 16 || cfg.max_n < cfg.min_n {
        return Err(Error::Config(format!(
            "bench sizes need max_n >= min_n >= 16, got {}..{}",
            cfg.min_n, cfg.max_n
        )));
    }
    if cfg.trials < 5 || cfg.d == 0 {
        return Err(Error::Config("bench needs at least 5 trials and d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut inputs = Vec::new();
    // (record index, input index, method) for every configuration that is timed
    let mut timed = Vec::new();
    let mut n = cfg.min_n;
    while n <= cfg.max_n {
        let d = cfg.d;
        let coeffs = RelPosCoefficients::new(n, random_array(&mut rng, (2 * n - 1, d)))?;
        let x: Array2<f64> = random_array(&mut rng, (n, d));
        let check = ORACLE_CHANNELS.min(d);
        let oracle = {
            let sub = RelPosCoefficients::new(n, coeffs.values().slice(s![.., ..check]).to_owned())?;
            naive_matvec(&sub, x.slice(s![.., ..check]))?
        };
        for &method in &cfg.methods {
            let mut record = BenchRecord {
                method: method.name(),
                n,
                d,
                trials: cfg.trials,
                median_seconds: None,
                doubling_ratio: None,
                checksum: None,
                status: "skipped",
            };
            let too_slow = method == BenchMethod::Naive && n > cfg.naive_max_n;
            if !too_slow && working_set(method, n, d) <= cfg.memory_limit {
                let mut y = method.run(&coeffs, &x)?;
                if cfg.corrupt == Some(method) {
                    y[[n / 2, 0]] += 1e-3 * (1.0 + y[[n / 2, 0]].abs());
                }
                if max_rel_err(&y.slice(s![.., ..check]), &oracle) > VERIFY_TOL {
                    record.status = "failed";
                } else {
                    record.checksum = Some(y.sum());
                    record.status = "ok";
                    for _ in 0..cfg.warmup {
                        std::hint::black_box(method.run(&coeffs, &x)?);
                    }
                    timed.push((records.len(), inputs.len(), method));
                }
            }
            records.push(record);
        }
        inputs.push((coeffs, x));
        n *= 2;
    }

    // Trials are interleaved across sizes so a slow stretch of the machine
    // lands on every configuration rather than on one. Each timed run follows
    // an untimed run of the same configuration, so all start with warm caches.
    let mut times = vec![Vec::with_capacity(cfg.trials); timed.len()];
    for _ in 0..cfg.trials {
        for (slot, &(_, input, method)) in timed.iter().enumerate() {
            let (coeffs, x) = &inputs[input];
            std::hint::black_box(method.run(coeffs, x)?);
            let start = Instant::now();
            std::hint::black_box(method.run(coeffs, std::hint::black_box(x))?);
            times[slot].push(start.elapsed().as_secs_f64());
        }
    }
    for (&(index, _, _), t) in timed.iter().zip(times) {
        records[index].median_seconds = Some(median(t));
    }

    let mut previous: Vec<Option<f64>> = vec![None; cfg.methods.len()];
    for (i, record) in records.iter_mut().enumerate() {
        let slot = i % cfg.methods.len();
        record.doubling_ratio = previous[slot].zip(record.median_seconds).map(|(p, m)| m / p);
        previous[slot] = record.median_seconds;
    }
    Ok(records)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// `method,n,d,trials,median_seconds,doubling_ratio,checksum,status`, with
/// `-` for missing values.
pub fn write_bench_csv<W: Write>(records: &[BenchRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "method,n,d,trials,median_seconds,doubling_ratio,checksum,status")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.n,
            r.d,
            r.trials,
            opt(r.median_seconds),
            opt(r.doubling_ratio),
            opt(r.checksum),
            r.status
        )?;
    }
    Ok(())
}
