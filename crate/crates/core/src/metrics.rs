//! Hierarchical and flat evaluation.
//!
//! Predicted (`alpha`) and true (`beta`) sets are ascending class-index lists,
//! always closed under ancestors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::constraint::{argmax_in, ScoreMatrix};
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

/// Default decision threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-sample predicted and true class sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSets {
    pub alpha: Vec<Vec<usize>>,
    pub beta: Vec<Vec<usize>>,
}

/// Classes scoring at least `threshold` in constrained scores. Closed under
/// ancestors because constrained scores never increase going down the tree.
pub fn predicted_set(s: &ScoreMatrix, t: &Taxonomy, threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !s.is_constrained() {
        return Err(Error::UnconstrainedInput);
    }
    check_taxonomy(s, t)?;
    Ok((0..s.rows())
        .map(|i| (0..s.cols()).filter(|&a| s.get(i, a) >= threshold).collect())
        .collect())
}

/// Thresholded set followed by ancestor closure, for scores that carry no
/// hierarchy guarantee.
pub fn closed_predicted_set(s: &ScoreMatrix, t: &Taxonomy, threshold: f64) -> Result<Vec<Vec<usize>>> {
    check_taxonomy(s, t)?;
    Ok((0..s.rows())
        .map(|i| {
            let mut keep = vec![false; t.len()];
            for a in (0..s.cols()).filter(|&a| s.get(i, a) >= threshold) {
                let mut cur = Some(a);
                while let Some(c) = cur {
                    keep[c] = true;
                    cur = t.parent(c);
                }
            }
            (0..t.len()).filter(|&a| keep[a]).collect()
        })
        .collect())
}

fn check_taxonomy(s: &ScoreMatrix, t: &Taxonomy) -> Result<()> {
    if s.cols() != t.len() || s.taxonomy_id() != t.fingerprint() {
        return Err(Error::TaxonomyMismatch);
    }
    Ok(())
}

/// Ancestor set of each true leaf, ascending.
pub fn truth_sets(leaves: &[usize], t: &Taxonomy) -> Result<Vec<Vec<usize>>> {
    leaves
        .iter()
        .map(|&l| {
            let mut s = t.ancestor_set(l)?;
            s.sort_unstable();
            Ok(s)
        })
        .collect()
}

/// Hierarchical precision, recall and F-score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hprf {
    pub hp: f64,
    pub hr: f64,
    pub hf: f64,
}

fn intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `hp = sum|a∩b| / sum|a|`, `hr = sum|a∩b| / sum|b|`, `hf` their harmonic
/// mean; `hp = 0` when nothing is predicted and `hf = 0` when `hp + hr = 0`.
pub fn hierarchical_prf(sets: &PredictionSets) -> Result<Hprf> {
    if sets.alpha.len() != sets.beta.len() {
        return Err(Error::dims(sets.beta.len(), sets.alpha.len()));
    }
    if let Some(i) = sets.beta.iter().position(Vec::is_empty) {
        return Err(Error::EmptyTruth(i));
    }
    let (mut inter, mut pred, mut truth) = (0usize, 0usize, 0usize);
    for (a, b) in sets.alpha.iter().zip(&sets.beta) {
        inter += intersection_len(a, b);
        pred += a.len();
        truth += b.len();
    }
    let hp = if pred == 0 { 0.0 } else { inter as f64 / pred as f64 };
    let hr = if truth == 0 { 0.0 } else { inter as f64 / truth as f64 };
    let hf = if hp + hr == 0.0 { 0.0 } else { 2.0 * hp * hr / (hp + hr) };
    Ok(Hprf { hp, hr, hf })
}

/// Correct-prediction ratio of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    /// `100 * |A in alpha and beta| / |A in beta|`; 0 when `support` is 0.
    pub recall_pct: f64,
    /// Samples whose truth contains the class.
    pub support: usize,
    /// Whether any sample's prediction contains the class.
    pub predicted_ever: bool,
}

pub fn per_class_recall(sets: &PredictionSets, classes: usize) -> Vec<ClassRecall> {
    let mut hit = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    let mut predicted = vec![false; classes];
    for (a, b) in sets.alpha.iter().zip(&sets.beta) {
        for &c in a {
            predicted[c] = true;
        }
        for &c in b {
            support[c] += 1;
            if a.binary_search(&c).is_ok() {
                hit[c] += 1;
            }
        }
    }
    (0..classes)
        .map(|c| ClassRecall {
            recall_pct: if support[c] == 0 {
                0.0
            } else {
                100.0 * hit[c] as f64 / support[c] as f64
            },
            support: support[c],
            predicted_ever: predicted[c],
        })
        .collect()
}

/// Macro-averaged flat scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlatPrf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// Precision, recall and F1 averaged over every label occurring in either
/// input. Undefined per-class ratios count as 0.
pub fn flat_prf(pred: &[usize], truth: &[usize]) -> FlatPrf {
    let mut labels: Vec<usize> = pred.iter().chain(truth).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return FlatPrf::default();
    }
    let mut acc = FlatPrf::default();
    for &l in &labels {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == l && t == l).count() as f64;
        let np = pred.iter().filter(|&&p| p == l).count() as f64;
        let nt = truth.iter().filter(|&&t| t == l).count() as f64;
        let p = if np == 0.0 { 0.0 } else { tp / np };
        let r = if nt == 0.0 { 0.0 } else { tp / nt };
        acc.p += p;
        acc.r += r;
        acc.f1 += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let n = labels.len() as f64;
    FlatPrf {
        p: acc.p / n,
        r: acc.r / n,
        f1: acc.f1 / n,
    }
}

/// Highest-scoring leaf of every row (lowest index on ties).
pub fn argmax_leaves(s: &ScoreMatrix, t: &Taxonomy) -> Vec<usize> {
    (0..s.rows()).map(|i| argmax_in(s.row(i), t.leaves())).collect()
}

/// Per-class entry of a [`MetricsReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub path: String,
    pub recall_pct: f64,
    pub support: usize,
    pub predicted_ever: bool,
    /// Recall when each sample is assigned only its argmax leaf and ancestors.
    pub argmax_recall_pct: f64,
}

/// Everything reported for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hp: f64,
    pub hr: f64,
    pub hf: f64,
    pub per_class: BTreeMap<String, ClassEntry>,
    pub flat: FlatPrf,
}

/// Evaluates C-column scores against true leaves.
///
/// Constrained scores are thresholded directly; anything else is thresholded
/// and then ancestor-closed.
pub fn evaluate(s: &ScoreMatrix, truth: &[usize], t: &Taxonomy, threshold: f64) -> Result<MetricsReport> {
    if truth.len() != s.rows() {
        return Err(Error::dims(s.rows(), truth.len()));
    }
    let alpha = if s.is_constrained() {
        predicted_set(s, t, threshold)?
    } else {
        closed_predicted_set(s, t, threshold)?
    };
    let beta = truth_sets(truth, t)?;
    let argmax = argmax_leaves(s, t);
    let sets = PredictionSets { alpha, beta };
    let h = hierarchical_prf(&sets)?;
    let recall = per_class_recall(&sets, t.len());
    let argmax_sets = PredictionSets {
        alpha: truth_sets(&argmax, t)?,
        beta: sets.beta,
    };
    let argmax_recall = per_class_recall(&argmax_sets, t.len());
    let per_class = (0..t.len())
        .map(|c| {
            let entry = ClassEntry {
                path: t.classes()[c].name.clone(),
                recall_pct: recall[c].recall_pct,
                support: recall[c].support,
                predicted_ever: recall[c].predicted_ever,
                argmax_recall_pct: argmax_recall[c].recall_pct,
            };
            (t.label(c).to_string(), entry)
        })
        .collect();
    Ok(MetricsReport {
        hp: h.hp,
        hr: h.hr,
        hf: h.hf,
        per_class,
        flat: flat_prf(&argmax, truth),
    })
}

impl MetricsReport {
    /// Per-class table in canonical order: `class,path,recall_pct,support,predicted_ever`.
    pub fn per_class_csv(&self, t: &Taxonomy) -> String {
        let mut out = String::from("class,path,recall_pct,support,predicted_ever\n");
        for c in 0..t.len() {
            if let Some(e) = self.per_class.get(t.label(c)) {
                out.push_str(&format!(
                    "{},{},{:.2},{},{}\n",
                    t.label(c),
                    e.path,
                    e.recall_pct,
                    e.support,
                    e.predicted_ever
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::mcm;
    use crate::taxonomy::preset;

    fn sets(alpha: Vec<Vec<usize>>, beta: Vec<Vec<usize>>) -> PredictionSets {
        PredictionSets { alpha, beta }
    }

    #[test]
    fn golden_hprf() {
        // Taxonomy {1, 2, 1.1} in canonical order: 1 -> 0, 2 -> 1, 1.1 -> 2.
        let perfect = hierarchical_prf(&sets(vec![vec![0, 2]], vec![vec![0, 2]])).unwrap();
        assert_eq!((perfect.hp, perfect.hr, perfect.hf), (1.0, 1.0, 1.0));
        let partial = hierarchical_prf(&sets(vec![vec![0]], vec![vec![0, 2]])).unwrap();
        assert_eq!((partial.hp, partial.hr), (1.0, 0.5));
        assert!((partial.hf - 2.0 / 3.0).abs() < 1e-15);
        let disjoint = hierarchical_prf(&sets(vec![vec![1]], vec![vec![0, 2]])).unwrap();
        assert_eq!((disjoint.hp, disjoint.hr, disjoint.hf), (0.0, 0.0, 0.0));
        assert!(matches!(
            hierarchical_prf(&sets(vec![vec![]], vec![vec![]])),
            Err(Error::EmptyTruth(0))
        ));
    }

    #[test]
    fn threshold_walk() {
        let t = preset("fc-deep").unwrap();
        let idx = |n: &str| t.resolve(n).unwrap();
        let mut row = vec![0.1; 12];
        for (n, v) in [
            ("CD45 pos", 0.9),
            ("Lymphocytes", 0.8),
            ("T cells", 0.7),
            ("CD4 T cells", 0.6),
        ] {
            row[idx(n)] = v;
        }
        let s = mcm(&ScoreMatrix::for_taxonomy(&t, 1, row).unwrap(), t.descendants()).unwrap();
        let mut want = vec![idx("CD45 pos"), idx("Lymphocytes"), idx("T cells"), idx("CD4 T cells")];
        want.sort_unstable();
        assert_eq!(predicted_set(&s, &t, 0.5).unwrap(), vec![want]);
        assert_eq!(predicted_set(&s, &t, 0.95).unwrap(), vec![Vec::<usize>::new()]);
        assert_eq!(predicted_set(&s, &t, 0.0).unwrap()[0].len(), 12);

        let raw = ScoreMatrix::for_taxonomy(&t, 1, vec![0.1; 12]).unwrap();
        assert!(matches!(predicted_set(&raw, &t, 0.5), Err(Error::UnconstrainedInput)));
    }

    #[test]
    fn closure_for_unconstrained_scores() {
        let t = preset("fc-deep").unwrap();
        let mut row = vec![0.0; 12];
        row[t.resolve("Kappa pos").unwrap()] = 0.9;
        let s = ScoreMatrix::for_taxonomy(&t, 1, row).unwrap();
        let got = closed_predicted_set(&s, &t, 0.5).unwrap();
        assert_eq!(got[0].len(), 4);
    }

    #[test]
    fn per_class_ratios() {
        let two = per_class_recall(&sets(vec![vec![0], vec![0]], vec![vec![0], vec![1]]), 2);
        assert_eq!(two[0].recall_pct, 100.0);
        assert_eq!(two[1].recall_pct, 0.0);
        assert!(!two[1].predicted_ever);
        assert_eq!(two[1].support, 1);

        let absent = per_class_recall(&sets(vec![vec![0]], vec![vec![0]]), 2);
        assert_eq!((absent[1].support, absent[1].recall_pct), (0, 0.0));
    }

    #[test]
    fn flat_macro() {
        let perfect = flat_prf(&[0, 1, 2], &[0, 1, 2]);
        assert_eq!((perfect.p, perfect.r, perfect.f1), (1.0, 1.0, 1.0));
        let lazy = flat_prf(&[0, 0, 0, 0], &[0, 0, 1, 1]);
        assert_eq!(lazy.r, 0.5);
        assert_eq!(lazy.p, 0.25);
    }

    #[test]
    fn flat_matches_confusion_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let k = rng.random_range(1..6);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut cm = vec![vec![0.0; k]; k];
            for (&p, &t) in pred.iter().zip(&truth) {
                cm[t][p] += 1.0;
            }
            let present: Vec<usize> = (0..k)
                .filter(|&c| (0..k).any(|o| cm[c][o] > 0.0 || cm[o][c] > 0.0))
                .collect();
            let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
            for &c in &present {
                let col: f64 = (0..k).map(|o| cm[o][c]).sum();
                let row: f64 = cm[c].iter().sum();
                let pc = if col > 0.0 { cm[c][c] / col } else { 0.0 };
                let rc = if row > 0.0 { cm[c][c] / row } else { 0.0 };
                p += pc;
                r += rc;
                f += if pc + rc > 0.0 { 2.0 * pc * rc / (pc + rc) } else { 0.0 };
            }
            let m = present.len() as f64;
            let got = flat_prf(&pred, &truth);
            assert!((got.p - p / m).abs() < 1e-12);
            assert!((got.r - r / m).abs() < 1e-12);
            assert!((got.f1 - f / m).abs() < 1e-12);
        }
    }

    #[test]
    fn report_is_consistent() {
        let t = preset("fc-shallow").unwrap();
        let leaves = t.leaves().to_vec();
        let mut values = Vec::new();
        for &l in &leaves {
            let mut row = vec![0.05; t.len()];
            row[l] = 0.9;
            values.extend(row);
        }
        let s = mcm(
            &ScoreMatrix::for_taxonomy(&t, leaves.len(), values).unwrap(),
            t.descendants(),
        )
        .unwrap();
        let r = evaluate(&s, &leaves, &t, 0.5).unwrap();
        assert_eq!((r.hp, r.hr, r.hf), (1.0, 1.0, 1.0));
        assert_eq!(r.flat.f1, 1.0);
        assert!(r.per_class.values().all(|e| e.recall_pct == 100.0));
        assert_eq!(r.per_class_csv(&t).lines().count(), t.len() + 1);
    }
}
