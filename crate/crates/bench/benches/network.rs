use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use fchc_bench::points;
use fchc_core::graph::knn_graph;
use fchc_core::layers::Mode;
use fchc_core::{preset, Network, NetworkConfig};

fn knn(c: &mut Criterion) {
    let x = points(2000, 12, 0);
    let mut g = c.benchmark_group("knn");
    g.sample_size(10);
    g.bench_function("2000x12 k=7", |b| b.iter(|| knn_graph(black_box(&x), 7).unwrap()));
    g.finish();
}

fn forward(c: &mut Criterion) {
    let t = preset("fc-deep").unwrap();
    let x = points(2000, 12, 1);
    let adj = Arc::new(knn_graph(&x, 7).unwrap());
    let mut g = c.benchmark_group("forward 2000 nodes");
    for kind in ["paper-gat", "gcn", "sage", "mlp"] {
        let net = Network::new(NetworkConfig::preset(kind, 12, t.len()).unwrap(), 0).unwrap();
        g.bench_function(format!("{kind} raw"), |b| {
            b.iter(|| net.raw_scores(black_box(&x), &adj).unwrap())
        });
        if kind == "paper-gat" {
            g.bench_function("paper-gat constrained", |b| {
                b.iter(|| net.forward(black_box(&x), &adj, Mode::Infer, t.descendants()).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, knn, forward);
criterion_main!(benches);
