//! Sequential against data-parallel execution of the same kernels. Build with
//! `--no-default-features` to compare against the build without rayon.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nystrom_core::attention::{multihead_nystrom, AttentionConfig, MultiHeadWeights};
use nystrom_core::bench::{error_samples, ErrorOptions};
use nystrom_core::rng::Rng;
use nystrom_core::{par, Matrix};

fn workers() -> Vec<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut out = vec![1];
    if available > 1 {
        out.push(available);
    }
    out
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_512");
    group.sample_size(10);
    let mut rng = Rng::new(1);
    let (a, b): (Matrix, Matrix) = (rng.gaussian(512, 512), rng.gaussian(512, 512));
    for t in workers() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, &t| {
            par::with_threads(t, || bench.iter(|| a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn heads(c: &mut Criterion) {
    let mut group = c.benchmark_group("multihead_nystrom_1024");
    group.sample_size(10);
    let cfg = AttentionConfig::new(1024, 256, 4, 64).unwrap();
    let mut rng = Rng::new(2);
    let weights = MultiHeadWeights::random(&cfg, &mut rng);
    let x = rng.gaussian(1024, 256);
    for t in workers() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, &t| {
            par::with_threads(t, || {
                bench.iter(|| multihead_nystrom(&x, &weights, &cfg).unwrap())
            })
        });
    }
    group.finish();
}

fn error_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("error_sweep_256");
    group.sample_size(10);
    for t in workers() {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, &t| {
            par::with_threads(t, || {
                bench.iter(|| {
                    error_samples(256, 64, &[16, 64], 8, &ErrorOptions::default()).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, heads, error_sweep);
criterion_main!(benches);
