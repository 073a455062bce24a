//! Criterion benchmarks for the Toeplitz products live in `benches/`.
