use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qpkam::{homological, kam};
use qpkam_bench::{golden_system, homological_input, series_pair};

fn product(c: &mut Criterion) {
    let mut group = c.benchmark_group("series_product");
    for k in [4usize, 8, 12] {
        let (a, b) = series_pair(2, k);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bench, &k| bench.iter(|| black_box(a.product(&b, 2 * k).unwrap())));
    }
    group.finish();
}

fn homological_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("homological_solve");
    for n in [2usize, 4] {
        let (lam, r) = homological_input(n, 8);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(homological::solve(&lam, &r, 1e-3, 1.2, 0.25).ok()))
        });
    }
    group.finish();
}

fn hill_reduction(c: &mut Criterion) {
    let (p, a, q) = golden_system();
    let sched = p.schedule(0.5, 1.2, 12);
    let mut group = c.benchmark_group("hill_reduction");
    group.sample_size(10);
    for eps in [1e-3, 1e-2] {
        group.bench_with_input(BenchmarkId::from_parameter(eps), &eps, |bench, &eps| bench.iter(|| black_box(kam::reduce(&a, &q, eps, &sched))));
    }
    group.finish();
}

criterion_group!(benches, product, homological_solve, hill_reduction);
criterion_main!(benches);
