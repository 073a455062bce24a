use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tnn::data::{read_file, Corpus, DEFAULT_VAL_FRACTION};
use tnn::driver::bench::{run_bench, write_bench_csv, BenchConfig, BenchMethod};
use tnn::driver::dump::{dump_toeplitz, write_matrix_csv};
use tnn::driver::selftest::{format_report, run_selftest, Fault, SelftestOptions};
use tnn::driver::train::{evaluate, extrapolate, train, write_extrapolation_csv};
use tnn::model::{load_checkpoint, Checkpoint};
use tnn::tno::write_coeffs_csv;
use tnn::{Error, Precision, RunConfig};

#[derive(Parser)]
#[command(name = "tnn", version, about = "Toeplitz neural networks: training, evaluation, kernel benchmarks and self-tests")]
struct Cli {
    /// Run configuration (flat TOML; see README for the keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the Toeplitz product precision.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Writes zero wall-clock times so that repeated runs give identical output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (train) or file (other commands; stdout if absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and the effective config.
    Train(TrainArgs),
    /// Mean validation loss of a checkpoint at one length.
    Eval(EvalArgs),
    /// Validation loss at several lengths.
    Extrapolate(ExtrapolateArgs),
    /// Time naive and FFT Toeplitz products over a geometric sweep of n.
    Bench(BenchArgs),
    /// Write one layer's effective Toeplitz matrix as CSV.
    DumpToeplitz(DumpArgs),
    /// Run the oracle suite and print a per-property table.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training text; overrides `data` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `steps` from the config.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Text file; its validation tail is evaluated.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Window length; defaults to the training length.
    #[arg(long)]
    len: Option<usize>,
    /// Most windows to evaluate.
    #[arg(long)]
    max_windows: Option<usize>,
}

#[derive(Args)]
struct ExtrapolateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256, 512, 1024])]
    lengths: Vec<usize>,
    /// Most tokens evaluated per length.
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    min_n: usize,
    #[arg(long, default_value_t = 16384)]
    max_n: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Largest n timed for the naive product.
    #[arg(long, default_value_t = 4096)]
    naive_max_n: usize,
    /// Comma-separated subset of naive, fft_paper2n, fft_pow2.
    #[arg(long, value_delimiter = ',', default_values_t = ["naive".to_string(), "fft_paper2n".to_string(), "fft_pow2".to_string()])]
    methods: Vec<String>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Replace the RPE output by ones, leaving decay and mask.
    #[arg(long)]
    unit_rpe: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Leave out the wall-clock scaling property.
    #[arg(long)]
    skip_timing: bool,
    /// Corrupt one kernel path (fft_paper2n or fft_pow2) to check that the suite notices.
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = check_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } | Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// `TNN_THREADS` caps internal parallelism; all work runs on the calling
/// thread, so any positive value is satisfied.
fn check_threads() -> Result<(), String> {
    match std::env::var("TNN_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("TNN_THREADS must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> tnn::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let mut config = match &cli.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            if let Some(data) = args.data {
                config.data = Some(data);
            }
            if let Some(steps) = args.steps {
                config.steps = steps;
            }
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(p) = cli.precision {
                config.precision = p;
            }
            if let Some(out) = cli.out {
                config.out_dir = out;
            }
            let data = config
                .data
                .clone()
                .ok_or_else(|| Error::Config("no training data: pass --data or set `data` in the config".into()))?;
            let corpus = Corpus::from_bytes(&read_file(&data)?, config.vocab_mode, config.val_fraction)?;
            let stats = corpus.stats();
            eprintln!(
                "corpus: {} bytes, {} tokens ({} train, {} val), {} distinct of {}; unigram baseline {:.4} nats",
                stats.bytes,
                stats.tokens,
                stats.train_tokens,
                stats.val_tokens,
                stats.distinct_tokens,
                stats.vocab_size,
                stats.unigram_val_nats
            );
            let outcome = train(&config, &corpus, cli.deterministic)?;
            if let Some(loss) = outcome.final_val_loss {
                println!("final validation loss {loss:.6} nats (unigram baseline {:.6})", outcome.unigram_val_nats);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("metrics {}", outcome.metrics.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => {
            let (ckpt, corpus) = load_with_data(&args.data, cli.precision)?;
            let len = args.len.unwrap_or(ckpt.meta.train_seq_len);
            let row = evaluate(&ckpt.model, &corpus.val, len, args.max_windows)?;
            write_out(cli.out.as_deref(), |w| write_extrapolation_csv(&[row], w))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Extrapolate(args) => {
            let (ckpt, corpus) = load_with_data(&args.data, cli.precision)?;
            let rows = extrapolate(&ckpt.model, &corpus.val, &args.lengths, args.max_tokens)?;
            write_out(cli.out.as_deref(), |w| write_extrapolation_csv(&rows, w))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(args) => {
            let methods = args
                .methods
                .iter()
                .map(|m| {
                    BenchMethod::ALL
                        .into_iter()
                        .find(|b| b.name() == m)
                        .ok_or_else(|| Error::Config(format!("unknown bench method {m:?}")))
                })
                .collect::<tnn::Result<Vec<_>>>()?;
            let records = run_bench(&BenchConfig {
                min_n: args.min_n,
                max_n: args.max_n,
                d: args.d,
                trials: args.trials,
                warmup: args.warmup,
                naive_max_n: args.naive_max_n,
                methods,
                seed: cli.seed.unwrap_or(0),
                ..BenchConfig::default()
            })?;
            write_out(cli.out.as_deref(), |w| write_bench_csv(&records, w))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpToeplitz(args) => {
            let ckpt = load_checkpoint(&args.checkpoint)?;
            let dump = dump_toeplitz(&ckpt.model, args.layer, args.n, args.unit_rpe)?;
            write_out(cli.out.as_deref(), |w| write_matrix_csv(&dump.matrix, w))?;
            if let Some(out) = &cli.out {
                let channels = channels_path(out);
                write_out(Some(&channels), |w| write_coeffs_csv(&dump.coeffs, w))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest(args) => {
            let results = run_selftest(&SelftestOptions {
                fault: args.inject_fault,
                skip_timing: args.skip_timing,
                seed: cli.seed.unwrap_or(0),
            });
            let report = format_report(&results);
            write_out(cli.out.as_deref(), |w| w.write_all(report.as_bytes()))?;
            if cli.out.is_some() {
                print!("{report}");
            }
            Ok(if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn load_with_data(args: &DataArgs, precision: Option<Precision>) -> tnn::Result<(Checkpoint, Corpus)> {
    let mut ckpt = load_checkpoint(&args.checkpoint)?;
    if let Some(p) = precision {
        ckpt.model.set_precision(p);
    }
    let corpus = Corpus::with_vocab(&read_file(&args.data)?, ckpt.meta.vocab.clone(), args.val_fraction)?;
    Ok((ckpt, corpus))
}

/// `dir/name.csv` -> `dir/name_channels.csv`.
fn channels_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_channels.csv"))
}

fn write_out(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> tnn::Result<()> {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(file);
            f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(p, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock).map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}
