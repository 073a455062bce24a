use std::path::Path;
use std::process::{Command, Output};

fn tnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnn"))
        .args(args)
        .env_remove("TNN_THREADS")
        .output()
        .expect("binary runs")
}

fn text(out: &[u8]) -> String {
    String::from_utf8_lossy(out).into_owned()
}

/// Small repetitive corpus and a config for a model that trains in a second.
fn setup(dir: &Path) {
    let sentence = "the quiet river runs past the old mill and the mill wheel turns slowly. ";
    std::fs::write(dir.join("corpus.txt"), sentence.repeat(60)).unwrap();
    std::fs::write(
        dir.join("run.toml"),
        "data = \"corpus.txt\"\nvocab_mode = \"char\"\nd_model = 8\ngtu_dim = 8\nglu_dim = 8\nlayers = 2\n\
         rpe_hidden = 8\nseq_len = 16\nbatch_size = 2\nsteps = 6\neval_every = 3\neval_windows = 4\n",
    )
    .unwrap();
}

fn train(dir: &Path, out: &str) -> Output {
    let config = dir.join("run.toml");
    let out = dir.join(out);
    tnn(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--deterministic"])
}

#[test]
fn train_eval_extrapolate_dump() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = train(dir.path(), "run");
    assert!(out.status.success(), "{}", text(&out.stderr));
    let run = dir.path().join("run");
    for f in ["model.ckpt", "metrics.jsonl", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    assert!(metrics.lines().next().unwrap().starts_with("{\"step\":1,\"split\":\"train\",\"loss\":"));

    let ckpt = run.join("model.ckpt");
    let data = dir.path().join("corpus.txt");
    let (ckpt, data) = (ckpt.to_str().unwrap(), data.to_str().unwrap());
    let eval = tnn(&["eval", "--checkpoint", ckpt, "--data", data]);
    assert!(eval.status.success(), "{}", text(&eval.stderr));
    let extra = tnn(&["extrapolate", "--checkpoint", ckpt, "--data", data, "--lengths", "16,32,64"]);
    assert!(extra.status.success(), "{}", text(&extra.stderr));
    let eval_csv = text(&eval.stdout);
    let extra_csv = text(&extra.stdout);
    assert_eq!(eval_csv.lines().next().unwrap(), "length,loss,perplexity,tokens_evaluated");
    // Extrapolation at the training length repeats the evaluation exactly.
    assert_eq!(eval_csv.lines().nth(1), extra_csv.lines().nth(1));
    let lengths: Vec<&str> = extra_csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(lengths, ["16", "32", "64"]);

    let dump = dir.path().join("dump.csv");
    let out = tnn(&["dump-toeplitz", "--checkpoint", ckpt, "--layer", "1", "--n", "5", "--out", dump.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let matrix = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(matrix.lines().count(), 6);
    assert_eq!(matrix.lines().nth(1).unwrap().split(',').skip(2).collect::<Vec<_>>(), ["0"; 4]);
    let channels = std::fs::read_to_string(dir.path().join("dump_channels.csv")).unwrap();
    assert_eq!(channels.lines().count(), 1 + 9 * 8);

    let bad_layer = tnn(&["dump-toeplitz", "--checkpoint", ckpt, "--layer", "2"]);
    assert_eq!(bad_layer.status.code(), Some(2));
    let bad_len = tnn(&["extrapolate", "--checkpoint", ckpt, "--data", data, "--lengths", "1"]);
    assert_eq!(bad_len.status.code(), Some(2));
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    assert!(train(dir.path(), "a").status.success());
    assert!(train(dir.path(), "b").status.success());
    for f in ["metrics.jsonl", "model.ckpt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn zero_steps_leaves_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let config = dir.path().join("run.toml");
    let out = dir.path().join("zero");
    let status = tnn(&[
        "train", "--config", config.to_str().unwrap(), "--steps", "0", "--out", out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", text(&status.stderr));
    assert_eq!(std::fs::read(out.join("metrics.jsonl")).unwrap(), b"");
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "stepz = 3\n").unwrap();
    let out = tnn(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("stepz"));
    assert_eq!(tnn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tnn(&["bench", "--min-n", "8"]).status.code(), Some(2));
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(tnn(&["train", "--data", empty.to_str().unwrap()]).status.code(), Some(2));
    let threads = Command::new(env!("CARGO_BIN_EXE_tnn"))
        .args(["selftest", "--skip-timing"])
        .env("TNN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn numeric_abort_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let config = dir.path().join("hot.toml");
    let base = std::fs::read_to_string(dir.path().join("run.toml")).unwrap();
    std::fs::write(&config, format!("{base}peak_lr = 1e300\nwarmup_steps = 0\nclip_norm = 0.0\n")).unwrap();
    let out = dir.path().join("hot");
    let res = tnn(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", text(&res.stderr));
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn bench_csv() {
    let out = tnn(&[
        "bench", "--min-n", "16", "--max-n", "64", "--d", "2", "--trials", "5", "--naive-max-n", "32",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,n,d,trials,median_seconds,doubling_ratio,checksum,status");
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert!(lines.contains(&"naive,64,2,5,-,-,-,skipped"));
    assert!(lines.iter().skip(1).filter(|l| !l.starts_with("naive,64")).all(|l| l.ends_with(",ok")));
}

#[test]
fn selftest_passes_and_detects_faults() {
    let ok = tnn(&["selftest", "--skip-timing"]);
    let report = text(&ok.stdout);
    assert!(ok.status.success(), "{report}");
    assert!(report.contains("equivalence.ssm"));
    let faulty = tnn(&["selftest", "--skip-timing", "--inject-fault", "fft_pow2"]);
    assert_eq!(faulty.status.code(), Some(1));
    let report = text(&faulty.stdout);
    let failed: Vec<&str> = report
        .lines()
        .filter(|l| l.contains(" FAIL "))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(failed, ["kernel.oracle_f64"]);
}
