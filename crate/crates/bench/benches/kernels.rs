use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scanet_core::tensor::Tensor;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| a.matmul(&b).unwrap()));
    }
    group.finish();
}

fn conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d");
    // first toy stem layer and a paper-scale-width layer on a small map
    for (name, x, k) in [
        ("toy_stem_8x2x32x32", [8, 2, 32, 32], [8, 2, 3, 3]),
        ("wide_2x64x28x28", [2, 64, 28, 28], [64, 64, 3, 3]),
    ] {
        let input = Tensor::randn(&x, 1.0, &mut rng);
        let kernel = Tensor::randn(&k, 0.1, &mut rng);
        group.bench_function(name, |bench| bench.iter(|| input.conv2d(&kernel, None, 1, 1).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matmul, conv2d);
criterion_main!(benches);
