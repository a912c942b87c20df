use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evoprune_core::tensor::{attention_forward, conv2d_forward, least_squares_solve, matmul};
use evoprune_core::{RngStream, Tensor};
use rand::Rng;

fn rand_t(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let mut rng = RngStream::new(0, 0);
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = rand_t(&[n, n], &mut rng);
        let b = rand_t(&[n, n], &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| matmul(&a, &b).unwrap()));
    }
    g.finish();

    let x = rand_t(&[32, 16, 16, 16], &mut rng);
    let k = rand_t(&[32, 16, 3, 3], &mut rng);
    c.bench_function("conv2d 32x16x16x16 k3", |b| b.iter(|| conv2d_forward(&x, &k, 1, 1).unwrap()));

    let tokens = rand_t(&[64, 17, 64], &mut rng);
    let qkv = rand_t(&[192, 64], &mut rng);
    let proj = rand_t(&[64, 64], &mut rng);
    c.bench_function("attention 64x17x64 h4", |b| {
        b.iter(|| attention_forward(&tokens, &qkv, &proj, 4, 16).unwrap())
    });

    let a = rand_t(&[200, 16], &mut rng);
    let y = rand_t(&[200, 8], &mut rng);
    c.bench_function("least squares 200x16", |b| b.iter(|| least_squares_solve(&a, &y).unwrap()));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
