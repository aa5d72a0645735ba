//! MCLoss and binary cross-entropy with exact (sub)gradients.
//!
//! For class `A` and a sample with multi-hot labels `y` and raw scores `h`:
//!
//! ```text
//! MCLoss_A = -y_A ln(max_{B in S_A} y_B h_B) - (1 - y_A) ln(1 - max_{B in S_A} h_B)
//! ```
//!
//! where `S_A` is the subtree of `A`. Totals are sums over classes and samples.
//! Every `ln` argument is clamped to `[EPS, 1 - EPS]`; a clamped term has zero gradient.

use serde::{Deserialize, Serialize};

use crate::constraint::ScoreMatrix;
use crate::error::{Error, Result};
use crate::taxonomy::DescendantMatrix;

/// Clamp applied inside every logarithm.
pub const EPS: f64 = 1e-7;

/// Which objective a model is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mcloss,
    Bce,
}

/// Loss value with its per-class and per-sample breakdowns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_class: Vec<f64>,
    pub per_sample: Vec<f64>,
}

impl LossReport {
    fn zeros(rows: usize, cols: usize) -> Self {
        LossReport {
            total: 0.0,
            per_class: vec![0.0; cols],
            per_sample: vec![0.0; rows],
        }
    }

    fn add(&mut self, i: usize, a: usize, v: f64) {
        self.per_class[a] += v;
        self.per_sample[i] += v;
    }

    fn finish(mut self) -> Self {
        self.total = self.per_sample.iter().sum();
        self
    }
}

#[inline]
fn clamp(x: f64) -> f64 {
    x.clamp(EPS, 1.0 - EPS)
}

#[inline]
fn active(x: f64) -> bool {
    (EPS..=1.0 - EPS).contains(&x)
}

fn check_labels(y: &[f64], rows: usize, cols: usize, r: Option<&DescendantMatrix>) -> Result<()> {
    if y.len() != rows * cols {
        return Err(Error::dims(rows * cols, y.len()));
    }
    if let Some(pos) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::SchemaMismatch(format!(
            "label entry {pos} is {}, expected 0 or 1",
            y[pos]
        )));
    }
    if let Some(r) = r {
        for i in 0..rows {
            let row = &y[i * cols..(i + 1) * cols];
            for a in 0..cols {
                if row[a] == 0.0 && r.descendants(a).iter().any(|&b| row[b] == 1.0) {
                    return Err(Error::LabelNotClosed { sample: i, class: a });
                }
            }
        }
    }
    Ok(())
}

fn check_scores(h: &ScoreMatrix, r: &DescendantMatrix) -> Result<()> {
    if h.cols() != r.dim() {
        return Err(Error::dims(format!("{} columns", r.dim()), h.cols()));
    }
    Ok(())
}

/// MCLoss over raw scores (not the constrained ones; the max is taken inside).
pub fn mcloss(h: &ScoreMatrix, y: &[f64], r: &DescendantMatrix) -> Result<LossReport> {
    check_scores(h, r)?;
    check_labels(y, h.rows(), h.cols(), Some(r))?;
    Ok(mcloss_raw(h.values(), y, r, None))
}

/// Gradient of [`mcloss`] with respect to the raw scores, row-major N×C.
///
/// Each max routes its gradient to exactly one maximizer (lowest index on ties).
pub fn mcloss_grad(h: &ScoreMatrix, y: &[f64], r: &DescendantMatrix) -> Result<Vec<f64>> {
    check_scores(h, r)?;
    check_labels(y, h.rows(), h.cols(), Some(r))?;
    let mut g = vec![0.0; h.values().len()];
    mcloss_raw(h.values(), y, r, Some(&mut g));
    Ok(g)
}

/// Unchecked MCLoss kernel; accumulates the gradient into `grad` when given.
pub(crate) fn mcloss_raw(h: &[f64], y: &[f64], r: &DescendantMatrix, mut grad: Option<&mut [f64]>) -> LossReport {
    let cols = r.dim();
    let rows = if cols == 0 { 0 } else { h.len() / cols };
    let mut report = LossReport::zeros(rows, cols);
    for i in 0..rows {
        let hr = &h[i * cols..(i + 1) * cols];
        let yr = &y[i * cols..(i + 1) * cols];
        for a in 0..cols {
            let subtree = r.descendants(a);
            if yr[a] == 1.0 {
                let mut best = subtree[0];
                let mut best_v = yr[best] * hr[best];
                for &b in &subtree[1..] {
                    let v = yr[b] * hr[b];
                    if v > best_v {
                        best = b;
                        best_v = v;
                    }
                }
                report.add(i, a, -clamp(best_v).ln());
                if let Some(g) = grad.as_deref_mut() {
                    if active(best_v) {
                        g[i * cols + best] -= yr[best] / best_v;
                    }
                }
            } else {
                let mut best = subtree[0];
                for &b in &subtree[1..] {
                    if hr[b] > hr[best] {
                        best = b;
                    }
                }
                let x = 1.0 - hr[best];
                report.add(i, a, -clamp(x).ln());
                if let Some(g) = grad.as_deref_mut() {
                    if active(x) {
                        g[i * cols + best] += 1.0 / x;
                    }
                }
            }
        }
    }
    report.finish()
}

/// Binary cross-entropy summed over classes and samples.
pub fn bce(h: &ScoreMatrix, y: &[f64]) -> Result<LossReport> {
    check_labels(y, h.rows(), h.cols(), None)?;
    Ok(bce_raw(h.values(), y, h.cols(), None))
}

/// Gradient of [`bce`] with respect to the scores.
pub fn bce_grad(h: &ScoreMatrix, y: &[f64]) -> Result<Vec<f64>> {
    check_labels(y, h.rows(), h.cols(), None)?;
    let mut g = vec![0.0; h.values().len()];
    bce_raw(h.values(), y, h.cols(), Some(&mut g));
    Ok(g)
}

pub(crate) fn bce_raw(h: &[f64], y: &[f64], cols: usize, mut grad: Option<&mut [f64]>) -> LossReport {
    let rows = if cols == 0 { 0 } else { h.len() / cols };
    let mut report = LossReport::zeros(rows, cols);
    for (k, (&hv, &yv)) in h.iter().zip(y).enumerate() {
        let (i, a) = (k / cols, k % cols);
        let mut v = 0.0;
        let mut d = 0.0;
        if yv != 0.0 {
            v -= yv * clamp(hv).ln();
            if active(hv) {
                d -= yv / hv;
            }
        }
        if yv != 1.0 {
            let x = 1.0 - hv;
            v -= (1.0 - yv) * clamp(x).ln();
            if active(x) {
                d += (1.0 - yv) / x;
            }
        }
        report.add(i, a, v);
        if let Some(g) = grad.as_deref_mut() {
            g[k] += d;
        }
    }
    report.finish()
}
