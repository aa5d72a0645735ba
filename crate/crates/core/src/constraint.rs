//! Max-constraint scoring and hierarchy diagnostics.
//!
//! The constrained score of a class is the maximum raw score over its
//! subtree, so an ancestor can never score below any of its descendants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{DescendantMatrix, Taxonomy};

/// Per-sample, per-class scores in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    taxonomy_id: u64,
    constrained: bool,
}

impl ScoreMatrix {
    /// Wraps raw (unconstrained) scores produced under the taxonomy identified by `taxonomy_id`.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, taxonomy_id: u64) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dims(rows * cols, values.len()));
        }
        if let Some(pos) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ScoreOutOfRange {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
                value: values[pos],
            });
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            values,
            taxonomy_id,
            constrained: false,
        })
    }

    /// Raw scores for taxonomy `t`.
    pub fn for_taxonomy(t: &Taxonomy, rows: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(rows, t.len(), values, t.fingerprint())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.cols + c]
    }

    /// Overwrites one entry without touching the `constrained` flag.
    pub fn set(&mut self, i: usize, c: usize, v: f64) {
        self.values[i * self.cols + c] = v;
    }

    pub fn taxonomy_id(&self) -> u64 {
        self.taxonomy_id
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained
    }

    /// Marks the matrix as constrained. Callers vouch for the hierarchy property.
    pub fn assume_constrained(mut self) -> Self {
        self.constrained = true;
        self
    }

    /// Keeps the first `cols` columns (drops the trailing root slot of model outputs).
    pub fn truncate_cols(&self, cols: usize, taxonomy_id: u64) -> Self {
        let mut values = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            values.extend_from_slice(&self.row(i)[..cols]);
        }
        ScoreMatrix {
            rows: self.rows,
            cols,
            values,
            taxonomy_id,
            constrained: self.constrained,
        }
    }

    fn with_values(&self, values: Vec<f64>, constrained: bool) -> Self {
        ScoreMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
            taxonomy_id: self.taxonomy_id,
            constrained,
        }
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn check_dims(h: &ScoreMatrix, r: &DescendantMatrix) -> Result<()> {
    if h.cols != r.dim() {
        return Err(Error::dims(format!("{} columns", r.dim()), h.cols));
    }
    Ok(())
}

/// Constrained scores: `out[i, a] = max over b in subtree(a) of h[i, b]`.
pub fn mcm(h: &ScoreMatrix, r: &DescendantMatrix) -> Result<ScoreMatrix> {
    mcm_sparse(h, r)
}

/// Max over the per-class descendant lists. Cost is linear in the number of
/// (class, descendant) pairs per sample.
pub fn mcm_sparse(h: &ScoreMatrix, r: &DescendantMatrix) -> Result<ScoreMatrix> {
    check_dims(h, r)?;
    let c = h.cols;
    let mut values = vec![0.0; h.values.len()];
    for (src, dst) in h.values.chunks_exact(c.max(1)).zip(values.chunks_exact_mut(c.max(1))) {
        for (a, out) in dst.iter_mut().enumerate() {
            // Every subtree contains its own root, so `src[a]` is a valid start.
            let mut m = src[a];
            for &b in r.descendants(a) {
                let v = src[b];
                if v > m {
                    m = v;
                }
            }
            *out = m;
        }
    }
    Ok(h.with_values(values, true))
}

/// Masked row max over the dense mask times the broadcast scores. Quadratic in C.
pub fn mcm_dense(h: &ScoreMatrix, r: &DescendantMatrix) -> Result<ScoreMatrix> {
    check_dims(h, r)?;
    let c = h.cols;
    let mut values = vec![0.0; h.values.len()];
    for (src, dst) in h.values.chunks_exact(c.max(1)).zip(values.chunks_exact_mut(c.max(1))) {
        for (a, out) in dst.iter_mut().enumerate() {
            let mask = r.row(a);
            let mut m = f64::NEG_INFINITY;
            for b in 0..c {
                let masked = if mask[b] { 1.0 } else { 0.0 } * src[b];
                if masked > m {
                    m = masked;
                }
            }
            *out = m;
        }
    }
    Ok(h.with_values(values, true))
}

/// A descendant scored above one of its ancestors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    pub ancestor: usize,
    pub descendant: usize,
    /// `score(descendant) - score(ancestor)`, always positive.
    pub gap: f64,
}

/// A parent whose constrained score is supplied by a strictly higher subclass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delegation {
    pub sample: usize,
    pub class: usize,
    pub delegate: usize,
}

fn check_taxonomy(s: &ScoreMatrix, t: &Taxonomy) -> Result<()> {
    if s.cols != t.len() || s.taxonomy_id != t.fingerprint() {
        return Err(Error::TaxonomyMismatch);
    }
    Ok(())
}

/// Every `(sample, ancestor, descendant)` with the descendant scored strictly higher.
pub fn find_violations(s: &ScoreMatrix, t: &Taxonomy) -> Result<Vec<Violation>> {
    check_taxonomy(s, t)?;
    let r = t.descendants();
    let mut out = Vec::new();
    for i in 0..s.rows {
        let row = s.row(i);
        for a in 0..s.cols {
            for &b in r.descendants(a) {
                if b != a && row[a] < row[b] {
                    out.push(Violation {
                        sample: i,
                        ancestor: a,
                        descendant: b,
                        gap: row[b] - row[a],
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Classes whose constrained score comes from a proper subclass scoring
/// strictly higher. Ties among maximizers go to the lowest canonical index.
pub fn find_delegations(h: &ScoreMatrix, t: &Taxonomy) -> Result<Vec<Delegation>> {
    check_taxonomy(h, t)?;
    let r = t.descendants();
    let mut out = Vec::new();
    for i in 0..h.rows {
        let row = h.row(i);
        for a in 0..h.cols {
            let arg = argmax_in(row, r.descendants(a));
            if arg != a && row[a] < row[arg] {
                out.push(Delegation {
                    sample: i,
                    class: a,
                    delegate: arg,
                });
            }
        }
    }
    Ok(out)
}

/// First index (in the given ascending order) attaining the maximum.
pub(crate) fn argmax_in(row: &[f64], idx: &[usize]) -> usize {
    let mut best = idx[0];
    for &b in &idx[1..] {
        if row[b] > row[best] {
            best = b;
        }
    }
    best
}
