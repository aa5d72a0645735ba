use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::train::pooled_scores;
use crate::error::Result;
use crate::graph::CellGraph;
use crate::layers::Network;
use crate::metrics::evaluate;
use crate::taxonomy::Taxonomy;

/// Shuffles per feature in [`feature_importance`].
pub const SHUFFLES: usize = 5;

fn hf(network: &Network, graphs: &[CellGraph], t: &Taxonomy, cfg: &ExperimentConfig) -> Result<f64> {
    let (scores, truth) = pooled_scores(network, graphs, t, cfg)?;
    Ok(evaluate(&scores, &truth, t, cfg.threshold)?.hf)
}

/// Permutation importance: the mean drop in hf when one feature column is
/// shuffled within each graph (edges unchanged), clamped at 0 and divided by
/// the largest drop. All zeros when no shuffle hurts.
pub fn feature_importance(
    network: &Network,
    graphs: &[CellGraph],
    t: &Taxonomy,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let base = hf(network, graphs, t, cfg)?;
    let width = graphs.first().map_or(0, |g| g.features.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drops = Vec::with_capacity(width);
    for f in 0..width {
        let mut total = 0.0;
        for _ in 0..SHUFFLES {
            let shuffled: Vec<CellGraph> = graphs
                .iter()
                .map(|g| {
                    let mut g = g.clone();
                    let mut col: Vec<f64> = (0..g.node_count()).map(|r| g.features.get(r, f)).collect();
                    col.shuffle(&mut rng);
                    for (r, v) in col.into_iter().enumerate() {
                        g.features.set(r, f, v);
                    }
                    g
                })
                .collect();
            total += base - hf(network, &shuffled, t, cfg)?;
        }
        drops.push((total / SHUFFLES as f64).max(0.0));
    }
    let top = drops.iter().copied().fold(0.0, f64::max);
    Ok(drops
        .into_iter()
        .map(|d| if top > 0.0 { d / top } else { 0.0 })
        .collect())
}

/// Penultimate activations of every node as CSV: `e0..e{w-1},label`.
pub fn export_embeddings(network: &Network, graph: &CellGraph, t: &Taxonomy) -> Result<String> {
    let emb = network.embeddings(&graph.features, &graph.adjacency)?;
    let mut out: Vec<String> = (0..emb.cols()).map(|c| format!("e{c}")).collect();
    out.push("label".into());
    let mut text = out.join(",");
    text.push('\n');
    for i in 0..emb.rows() {
        let mut row: Vec<String> = emb.row(i).iter().map(|v| v.to_string()).collect();
        row.push(
            graph
                .labels
                .as_ref()
                .map_or(String::new(), |l| t.label(l[i]).to_string()),
        );
        text.push_str(&row.join(","));
        text.push('\n');
    }
    Ok(text)
}
