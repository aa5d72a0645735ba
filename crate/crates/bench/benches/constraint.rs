use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fchc_bench::scores;
use fchc_core::constraint::{mcm_dense, mcm_sparse};
use fchc_core::taxonomy::{random_taxonomy, TreeShape};
use fchc_core::{find_violations, preset};

fn presets(c: &mut Criterion) {
    let t = preset("fc-deep").unwrap();
    let h = scores(&t, 5000, 0);
    let mut g = c.benchmark_group("fc-deep 5000 rows");
    g.bench_function("sparse", |b| {
        b.iter(|| mcm_sparse(black_box(&h), t.descendants()).unwrap())
    });
    g.bench_function("dense", |b| {
        b.iter(|| mcm_dense(black_box(&h), t.descendants()).unwrap())
    });
    g.bench_function("find_violations", |b| {
        b.iter(|| find_violations(black_box(&h), &t).unwrap())
    });
    g.finish();
}

fn scaling(c: &mut Criterion) {
    let mut g = c.benchmark_group("mcm scaling 100 rows");
    g.sample_size(20);
    for classes in [10, 100, 1000] {
        for (shape, name) in [(TreeShape::Chain, "chain"), (TreeShape::Bushy, "bushy")] {
            let t = random_taxonomy(classes, shape, 1);
            let h = scores(&t, 100, 2);
            g.bench_with_input(BenchmarkId::new(format!("sparse/{name}"), classes), &h, |b, h| {
                b.iter(|| mcm_sparse(black_box(h), t.descendants()).unwrap())
            });
            g.bench_with_input(BenchmarkId::new(format!("dense/{name}"), classes), &h, |b, h| {
                b.iter(|| mcm_dense(black_box(h), t.descendants()).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, presets, scaling);
criterion_main!(benches);
