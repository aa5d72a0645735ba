//! Per-patient Euclidean kNN graphs.
//!
//! Each cell links to its `k` nearest cells (squared distance, ties to the
//! lower row index) followed by a self-loop. Edges are directed: the list of
//! node `i` is the neighborhood `i` attends over.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CellTable;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

/// Directed adjacency in compressed-row form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        offsets.push(0);
        for list in lists {
            if let Some(&bad) = list.iter().find(|&&j| j >= n) {
                return Err(Error::ShapeMismatch {
                    op: "adjacency",
                    detail: format!("target {bad} out of {n} nodes"),
                });
            }
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        Ok(Adjacency { offsets, targets })
    }

    /// Every node linked only to itself.
    pub fn self_loops(n: usize) -> Self {
        Adjacency {
            offsets: (0..=n).collect(),
            targets: (0..n).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.targets.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.edge_range(i)]
    }

    /// Positions of node `i`'s edges in edge order.
    pub fn edge_range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Source node of every edge, in edge order.
    pub fn sources(&self) -> Vec<usize> {
        (0..self.node_count())
            .flat_map(|i| std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]))
            .collect()
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        (0..self.node_count()).map(|i| self.neighbors(i).to_vec()).collect()
    }

    /// In-degree of every node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.node_count()];
        for &j in &self.targets {
            d[j] += 1;
        }
        d
    }

    pub fn has_empty_neighborhood(&self) -> Option<usize> {
        (0..self.node_count()).find(|&i| self.offsets[i] == self.offsets[i + 1])
    }
}

/// Exact kNN over the rows of `points` with a self-loop appended to every list.
pub fn knn_graph(points: &Tensor, k: usize) -> Result<Adjacency> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if n <= k {
        return Err(Error::TooFewPoints { n, k });
    }
    if !points.is_finite() {
        return Err(Error::NonFiniteValue("knn_graph input".into()));
    }
    let lists: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = points.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(xi, points.row(j)), j))
                .collect();
            let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_key);
                cand.truncate(k);
            }
            cand.sort_unstable_by(by_key);
            let mut out: Vec<usize> = cand.into_iter().map(|(_, j)| j).collect();
            out.push(i);
            out
        })
        .collect();
    Adjacency::from_lists(&lists)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-patient marker rescaling applied before kNN and training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Standardization {
    None,
    #[default]
    Zscore,
    Minmax,
}

impl std::str::FromStr for Standardization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Standardization::None),
            "zscore" => Ok(Standardization::Zscore),
            "minmax" => Ok(Standardization::Minmax),
            other => Err(Error::Config(format!("unknown standardization {other:?}"))),
        }
    }
}

/// Rescales every column; constant columns map to 0.
pub fn standardize(x: &Tensor, mode: Standardization) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    if mode == Standardization::None || n == 0 {
        return out;
    }
    for c in 0..d {
        let col = (0..n).map(|r| x.get(r, c));
        let (shift, scale) = match mode {
            Standardization::Zscore => {
                let mean = col.clone().sum::<f64>() / n as f64;
                let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                (mean, var.sqrt())
            }
            Standardization::Minmax => {
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
            Standardization::None => unreachable!(),
        };
        for r in 0..n {
            let v = if scale > 0.0 {
                (x.get(r, c) - shift) / scale
            } else {
                0.0
            };
            out.set(r, c, v);
        }
    }
    out
}

/// One patient's cells as a graph.
#[derive(Clone, Debug)]
pub struct CellGraph {
    pub patient_id: String,
    /// Standardized N×12 features.
    pub features: Tensor,
    pub adjacency: Arc<Adjacency>,
    /// Leaf class index of every node, when labeled.
    pub labels: Option<Vec<usize>>,
}

impl CellGraph {
    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    /// Ancestor-closed multi-hot targets, N×C row-major.
    pub fn targets(&self, t: &Taxonomy) -> Option<Vec<f64>> {
        let labels = self.labels.as_ref()?;
        let closures: Vec<Vec<f64>> = t.leaves().iter().map(|&l| t.label_closure(l).unwrap()).collect();
        let mut leaf_pos = vec![usize::MAX; t.len()];
        for (p, &l) in t.leaves().iter().enumerate() {
            leaf_pos[l] = p;
        }
        Some(
            labels
                .iter()
                .flat_map(|&l| closures[leaf_pos[l]].iter().copied())
                .collect(),
        )
    }
}

/// Resolves a table's label strings to leaf indices.
pub fn resolve_labels(table: &CellTable, t: &Taxonomy) -> Result<Vec<usize>> {
    table
        .labels
        .iter()
        .map(|name| match t.resolve(name) {
            Ok(i) if t.is_leaf(i) => Ok(i),
            _ => Err(Error::UnknownLabel(name.clone())),
        })
        .collect()
}

/// One graph per patient; no edges cross patients.
pub fn build_patient_graphs(
    cohort: &[CellTable],
    t: &Taxonomy,
    k: usize,
    mode: Standardization,
) -> Result<Vec<CellGraph>> {
    cohort
        .iter()
        .map(|table| {
            if table.len() == 0 {
                return Err(Error::EmptyPatient(table.patient_id.clone()));
            }
            let labels = if table.labels.is_empty() {
                None
            } else {
                Some(resolve_labels(table, t)?)
            };
            let features = standardize(&table.features, mode);
            let adjacency = Arc::new(knn_graph(&features, k)?);
            Ok(CellGraph {
                patient_id: table.patient_id.clone(),
                features,
                adjacency,
                labels,
            })
        })
        .collect()
}

/// Sidecar describing a cached set of edge lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphCacheMeta {
    pub k: usize,
    pub standardization: Standardization,
    /// Hex sha256 over patient ids and raw feature bits.
    pub feature_checksum: String,
    pub patients: Vec<String>,
}

/// Checksum of the raw (unstandardized) cohort features.
pub fn feature_checksum(cohort: &[CellTable]) -> String {
    let mut h = Sha256::new();
    for table in cohort {
        h.update(table.patient_id.as_bytes());
        h.update([0u8]);
        h.update((table.features.rows() as u64).to_le_bytes());
        h.update((table.features.cols() as u64).to_le_bytes());
        for v in table.features.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn edge_file(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("edges_{i:03}.csv"))
}

/// Writes `edges_NNN.csv` (src,dst) per patient plus `graph.json`.
pub fn write_graph_cache(
    dir: &Path,
    cohort: &[CellTable],
    graphs: &[CellGraph],
    k: usize,
    mode: Standardization,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, g) in graphs.iter().enumerate() {
        let path = edge_file(dir, i);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["src", "dst"])?;
        for src in 0..g.adjacency.node_count() {
            for &dst in g.adjacency.neighbors(src) {
                w.write_record([src.to_string(), dst.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let meta = GraphCacheMeta {
        k,
        standardization: mode,
        feature_checksum: feature_checksum(cohort),
        patients: graphs.iter().map(|g| g.patient_id.clone()).collect(),
    };
    let path = dir.join("graph.json");
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Cached adjacencies, or `None` when the cache is missing or stale for these inputs.
pub fn read_graph_cache(
    dir: &Path,
    cohort: &[CellTable],
    k: usize,
    mode: Standardization,
) -> Result<Option<Vec<Adjacency>>> {
    let meta_path = dir.join("graph.json");
    let Ok(text) = std::fs::read_to_string(&meta_path) else {
        return Ok(None);
    };
    let meta: GraphCacheMeta = serde_json::from_str(&text)?;
    let expected = GraphCacheMeta {
        k,
        standardization: mode,
        feature_checksum: feature_checksum(cohort),
        patients: cohort.iter().map(|t| t.patient_id.clone()).collect(),
    };
    if meta != expected {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(cohort.len());
    for (i, table) in cohort.iter().enumerate() {
        let mut lists = vec![Vec::new(); table.len()];
        let mut r = csv::Reader::from_path(edge_file(dir, i))?;
        for rec in r.deserialize() {
            let (src, dst): (usize, usize) = rec?;
            if src >= lists.len() {
                return Ok(None);
            }
            lists[src].push(dst);
        }
        out.push(Adjacency::from_lists(&lists)?);
    }
    Ok(Some(out))
}
