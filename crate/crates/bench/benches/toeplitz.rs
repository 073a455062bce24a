use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tnn::check::random_array;
use tnn::toeplitz::{causal_matvec_batch, fft_matvec, naive_matvec};
use tnn::{CirculantStrategy, RelPosCoefficients};

const D: usize = 16;

fn instance(n: usize) -> (RelPosCoefficients, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let coeffs = RelPosCoefficients::new(n, random_array(&mut rng, (2 * n - 1, D))).unwrap();
    (coeffs, random_array(&mut rng, (n, D)))
}

fn matvec(c: &mut Criterion) {
    let mut group = c.benchmark_group("toeplitz_matvec");
    group.sample_size(20);
    for n in [256, 512, 1024, 2048, 4096] {
        let (coeffs, x) = instance(n);
        group.throughput(Throughput::Elements((n * D) as u64));
        if n <= 2048 {
            group.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
                b.iter(|| naive_matvec(&coeffs, x.view()).unwrap())
            });
        }
        for strategy in CirculantStrategy::ALL {
            group.bench_with_input(BenchmarkId::new(strategy.name(), n), &n, |b, _| {
                b.iter(|| fft_matvec(&coeffs, x.view(), strategy).unwrap())
            });
        }
        let xb: Array3<f64> = x.clone().insert_axis(ndarray::Axis(0));
        group.bench_with_input(BenchmarkId::new("causal", n), &n, |b, _| {
            b.iter(|| causal_matvec_batch(&coeffs, xb.view()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, matvec);
criterion_main!(benches);
