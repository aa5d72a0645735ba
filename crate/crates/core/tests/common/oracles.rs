//! Brute-force reference implementations, written independently of the
//! library code they check. Shared by the core property tests and the
//! acceptance suite.
#![allow(dead_code)]

use std::collections::HashSet;

/// Whether `b` lies in the subtree of `a`, found by walking parent links up from `b`.
pub fn reaches(parents: &[Option<usize>], a: usize, b: usize) -> bool {
    let mut cur = Some(b);
    while let Some(c) = cur {
        if c == a {
            return true;
        }
        cur = parents[c];
    }
    false
}

/// Constrained scores by explicit subtree walk.
pub fn mcm_oracle(parents: &[Option<usize>], h: &[f64]) -> Vec<f64> {
    let c = parents.len();
    let mut out = vec![0.0; h.len()];
    for (i, row) in h.chunks_exact(c).enumerate() {
        for a in 0..c {
            let mut best = f64::NEG_INFINITY;
            for (b, &v) in row.iter().enumerate() {
                if reaches(parents, a, b) && v > best {
                    best = v;
                }
            }
            out[i * c + a] = best;
        }
    }
    out
}

/// Pairs `(a, b)` with `b` below `a` and `h[b] > h[a]`, per row.
pub fn violation_count(parents: &[Option<usize>], s: &[f64]) -> usize {
    let c = parents.len();
    let mut n = 0;
    for row in s.chunks_exact(c) {
        for a in 0..c {
            for b in 0..c {
                if a != b && reaches(parents, a, b) && row[b] > row[a] {
                    n += 1;
                }
            }
        }
    }
    n
}

/// hp, hr, hf by set enumeration.
pub fn hprf_oracle(alpha: &[Vec<usize>], beta: &[Vec<usize>]) -> (f64, f64, f64) {
    let (mut inter, mut pred, mut truth) = (0usize, 0usize, 0usize);
    for (a, b) in alpha.iter().zip(beta) {
        let sa: HashSet<usize> = a.iter().copied().collect();
        let sb: HashSet<usize> = b.iter().copied().collect();
        inter += sa.intersection(&sb).count();
        pred += sa.len();
        truth += sb.len();
    }
    let hp = if pred == 0 { 0.0 } else { inter as f64 / pred as f64 };
    let hr = if truth == 0 { 0.0 } else { inter as f64 / truth as f64 };
    let hf = if hp + hr == 0.0 { 0.0 } else { 2.0 * hp * hr / (hp + hr) };
    (hp, hr, hf)
}

/// Ancestors of `a` including itself, as a set.
pub fn ancestors(parents: &[Option<usize>], a: usize) -> HashSet<usize> {
    (0..parents.len()).filter(|&x| reaches(parents, x, a)).collect()
}

/// Neighbor lists by a full sort of every candidate on (squared distance, index),
/// self appended last.
pub fn knn_oracle(points: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let mut d = 0.0;
                    for (x, y) in points[i].iter().zip(&points[j]) {
                        d += (x - y) * (x - y);
                    }
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut out: Vec<usize> = all[..k].iter().map(|p| p.1).collect();
            out.push(i);
            out
        })
        .collect()
}
