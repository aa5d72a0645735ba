use std::hint::black_box;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{mcm_dense, mcm_sparse, ScoreMatrix};
use crate::diffcore::Tensor;
use crate::error::Result;
use crate::graph::knn_graph;
use crate::layers::{Network, NetworkConfig};
use crate::taxonomy::{preset, random_taxonomy, Taxonomy, TreeShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub classes: usize,
    pub shape: String,
    /// Set entries of the descendant matrix.
    pub pairs: usize,
    pub sparse_seconds: f64,
    pub dense_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples: usize,
    pub rows: Vec<ScalingRow>,
    /// Log-log slope of sparse time against pair count.
    pub sparse_exponent: f64,
    /// Log-log slope of dense time against class count.
    pub dense_exponent: f64,
    pub forward_seconds: f64,
    pub constraint_seconds: f64,
    /// Constraint time as a percentage of the forward pass.
    pub constraint_overhead_pct: f64,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Fastest of several timed batches, each repeating `f` until at least
/// `min_seconds` has passed; returns seconds per call.
pub fn time_per_call(mut f: impl FnMut(), min_seconds: f64) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let start = Instant::now();
        let mut calls = 0u32;
        while calls == 0 || start.elapsed().as_secs_f64() < min_seconds {
            f();
            calls += 1;
        }
        best = best.min(start.elapsed().as_secs_f64() / calls as f64);
    }
    best
}

fn random_scores(t: &Taxonomy, rows: usize, rng: &mut ChaCha8Rng) -> ScoreMatrix {
    let values = (0..rows * t.len()).map(|_| rng.random::<f64>()).collect();
    ScoreMatrix::for_taxonomy(t, rows, values).unwrap()
}

/// Times the sparse and dense constraint paths on random chain and bushy
/// trees of each size, plus the constraint's share of a paper-gat forward
/// pass over the 13-slot output.
pub fn bench_constraint(class_counts: &[usize], samples: usize, seed: u64) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &c in class_counts {
        for (shape, name) in [(TreeShape::Chain, "chain"), (TreeShape::Bushy, "bushy")] {
            let t = random_taxonomy(c, shape, rng.random());
            let h = random_scores(&t, samples, &mut rng);
            let r = t.descendants();
            let sparse = time_per_call(|| drop(black_box(mcm_sparse(black_box(&h), r))), 0.02);
            let dense = time_per_call(|| drop(black_box(mcm_dense(black_box(&h), r))), 0.02);
            rows.push(ScalingRow {
                classes: c,
                shape: name.into(),
                pairs: r.pair_count(),
                sparse_seconds: sparse,
                dense_seconds: dense,
            });
        }
    }
    let sparse_exponent = loglog_slope(
        &rows
            .iter()
            .map(|r| (r.pairs as f64, r.sparse_seconds))
            .collect::<Vec<_>>(),
    );
    let dense_exponent = loglog_slope(
        &rows
            .iter()
            .map(|r| (r.classes as f64, r.dense_seconds))
            .collect::<Vec<_>>(),
    );

    let t = preset("fc-deep")?;
    let n = 2000;
    let feats = Tensor::new(n, 12, (0..n * 12).map(|_| rng.random::<f64>()).collect())?;
    let adj = Arc::new(knn_graph(&feats, 7)?);
    let net = Network::new(NetworkConfig::paper_gat(12, t.len()), seed)?;
    let forward = time_per_call(|| drop(black_box(net.raw_scores(&feats, &adj))), 0.05);
    let raw = net.raw_scores(&feats, &adj)?;
    let with_root = t.descendants().with_root();
    let h = ScoreMatrix::new(n, raw.cols(), raw.into_data(), 0)?;
    let constraint = time_per_call(|| drop(black_box(mcm_sparse(black_box(&h), &with_root))), 0.02);
    Ok(BenchReport {
        samples,
        rows,
        sparse_exponent,
        dense_exponent,
        forward_seconds: forward,
        constraint_seconds: constraint,
        constraint_overhead_pct: 100.0 * constraint / forward,
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("classes,shape,pairs,sparse_seconds,dense_seconds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6e},{:.6e}\n",
                r.classes, r.shape, r.pairs, r.sparse_seconds, r.dense_seconds
            ));
        }
        out
    }
}
