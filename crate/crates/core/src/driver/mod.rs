//! Training, evaluation, benchmark, matrix-dump and self-test drivers behind
//! the command-line tool.

pub mod bench;
pub mod dump;
pub mod selftest;
pub mod train;

pub use bench::{run_bench, write_bench_csv, BenchConfig, BenchMethod, BenchRecord};
pub use dump::{dump_toeplitz, write_matrix_csv, ToeplitzDump};
pub use selftest::{run_selftest, Fault, PropertyResult};
pub use train::{evaluate, extrapolate, train, write_extrapolation_csv, EvalResult, MetricsLine, TrainOutcome};
