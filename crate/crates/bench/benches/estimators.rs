use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use csalign_bench::{gaussian_pair, unit_pair};
use csalign_core::{cs_divergence, grad_cs, grad_infonce, gram_stats, infonce, KernelParams};

fn divergence(c: &mut Criterion) {
    let mut group = c.benchmark_group("cs");
    for n in [64, 256, 1024] {
        let (x, y) = gaussian_pair(n, 8, 1.0, 1);
        let k = KernelParams::default();
        group.bench_with_input(BenchmarkId::new("gram_stats", n), &n, |b, _| {
            b.iter(|| gram_stats(black_box(&x), black_box(&y), k))
        });
        group.bench_with_input(BenchmarkId::new("cs_divergence", n), &n, |b, _| {
            b.iter(|| cs_divergence(black_box(&x), black_box(&y), k))
        });
        group.bench_with_input(BenchmarkId::new("grad_cs", n), &n, |b, _| {
            b.iter(|| grad_cs(black_box(&x), black_box(&y), k))
        });
    }
    group.finish();
}

fn contrastive(c: &mut Criterion) {
    let mut group = c.benchmark_group("infonce");
    for n in [64, 256] {
        let (x, y) = unit_pair(n, 8, 2);
        group.bench_with_input(BenchmarkId::new("value", n), &n, |b, _| {
            b.iter(|| infonce(black_box(&x), black_box(&y), 0.07))
        });
        group.bench_with_input(BenchmarkId::new("gradient", n), &n, |b, _| {
            b.iter(|| grad_infonce(black_box(&x), black_box(&y), 0.07))
        });
    }
    group.finish();
}

criterion_group!(benches, divergence, contrastive);
criterion_main!(benches);
