//! Cell tables: CSV ingestion, synthetic hierarchical cohorts, and patient fold plans.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::taxonomy::{lookup, Taxonomy};

/// Marker columns in panel order.
pub const MARKERS: [&str; 12] = [
    "FS INT",
    "SS INT",
    "CD14-FITC",
    "CD19-PE",
    "CD13-ECD",
    "CD33-PC5.5",
    "CD34-PC7",
    "CD117-APC",
    "CD7-APC700",
    "CD16-APC750",
    "HLA-PB",
    "CD45-KO",
];

/// One patient's cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTable {
    pub patient_id: String,
    /// N×12 marker values.
    pub features: Tensor,
    /// Leaf label per row as written in the source; empty for unlabeled tables.
    pub labels: Vec<String>,
}

impl CellTable {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

/// Reads `path`, grouping rows by the optional `patient` column (default id:
/// the file stem). Labels must name leaves of `t`.
pub fn load_cells(path: &Path, t: &Taxonomy) -> Result<Vec<CellTable>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 13 || names[..12] != MARKERS || names[12] != "label" {
        return Err(Error::SchemaMismatch(format!(
            "expected the 12 marker columns then \"label\", got {names:?}"
        )));
    }
    let has_patient = match names.len() {
        13 => false,
        14 if names[13] == "patient" => true,
        _ => {
            return Err(Error::SchemaMismatch(format!(
                "unexpected trailing columns in {names:?}"
            )))
        }
    };
    let stem = path
        .file_stem()
        .map_or("patient".into(), |s| s.to_string_lossy().into_owned());

    let mut groups: BTreeMap<String, (Vec<f64>, Vec<String>)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let mut row = [0.0f64; 12];
        for (c, v) in row.iter_mut().enumerate() {
            *v = rec[c]
                .trim()
                .parse()
                .map_err(|_| Error::SchemaMismatch(format!("row {}: {:?} is not a number", line + 1, &rec[c])))?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue(format!(
                    "row {}, column {}",
                    line + 1,
                    MARKERS[c]
                )));
            }
        }
        let label = rec[12].trim().to_string();
        match t.resolve(&label) {
            Ok(i) if t.is_leaf(i) => {}
            _ => return Err(Error::UnknownLabel(label)),
        }
        let pid = if has_patient {
            rec[13].trim().to_string()
        } else {
            stem.clone()
        };
        let entry = groups.entry(pid.clone()).or_insert_with(|| {
            order.push(pid);
            Default::default()
        });
        entry.0.extend_from_slice(&row);
        entry.1.push(label);
    }
    order
        .into_iter()
        .map(|pid| {
            let (values, labels) = groups.remove(&pid).unwrap();
            Ok(CellTable {
                patient_id: pid,
                features: Tensor::new(labels.len(), 12, values)?,
                labels,
            })
        })
        .collect()
}

/// Writes tables in the ingestion schema, with a `patient` column.
pub fn write_cells(path: &Path, tables: &[CellTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = MARKERS.to_vec();
    header.extend(["label", "patient"]);
    w.write_record(&header)?;
    for t in tables {
        for i in 0..t.len() {
            let mut rec: Vec<String> = t.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(t.labels.get(i).cloned().unwrap_or_default());
            rec.push(t.patient_id.clone());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Synthetic cohort generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub taxonomy: String,
    pub patients: usize,
    pub cells_per_patient: usize,
    /// Leaf proportions in canonical leaf order; `None` means uniform apart from `minority`.
    pub proportions: Option<Vec<f64>>,
    /// Leaf (by name or path) given `fraction` of cells; the others share the rest equally.
    pub minority: Option<(String, f64)>,
    /// Spread of cells around their leaf center.
    pub covariance_scale: f64,
    /// 0 gives i.i.d. leaf centers; 1 places them purely by their position in the tree.
    pub coupling: f64,
    /// Length of each step of the center walk from a class to its child.
    pub center_scale: f64,
    /// Features whose centers vary by class; the rest are pure noise.
    pub informative: Vec<usize>,
    /// Per-patient center offset spread (batch effect).
    pub patient_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            taxonomy: "fc-deep".into(),
            patients: 12,
            cells_per_patient: 5000,
            proportions: None,
            minority: None,
            covariance_scale: 1.0,
            coupling: 0.9,
            center_scale: 1.5,
            informative: (0..12).collect(),
            patient_shift: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        lookup(&self.taxonomy)
    }

    /// Leaf mixture weights in canonical leaf order.
    pub fn leaf_proportions(&self, t: &Taxonomy) -> Result<Vec<f64>> {
        let leaves = t.leaves();
        let p = match (&self.proportions, &self.minority) {
            (Some(p), _) => p.clone(),
            (None, None) => vec![1.0 / leaves.len() as f64; leaves.len()],
            (None, Some((name, frac))) => {
                let m = t.resolve(name)?;
                let pos = leaves
                    .iter()
                    .position(|&l| l == m)
                    .ok_or_else(|| Error::InvalidProportions(format!("{name:?} is not a leaf")))?;
                if leaves.len() < 2 || !(0.0..1.0).contains(frac) {
                    return Err(Error::InvalidProportions(format!("minority fraction {frac}")));
                }
                let rest = (1.0 - frac) / (leaves.len() - 1) as f64;
                (0..leaves.len()).map(|i| if i == pos { *frac } else { rest }).collect()
            }
        };
        if p.len() != leaves.len() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProportions(format!(
                "{} weights for {} leaves",
                p.len(),
                leaves.len()
            )));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidProportions(format!(
                "weights sum to {}",
                p.iter().sum::<f64>()
            )));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!("coupling {} outside [0, 1]", self.coupling)));
        }
        if let Some(&f) = self.informative.iter().find(|&&f| f >= 12) {
            return Err(Error::Config(format!("informative feature {f} out of range")));
        }
        if self.patients == 0 || self.cells_per_patient == 0 {
            return Err(Error::Config("empty cohort".into()));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Leaf centers (canonical leaf order, 12 values each) for a config.
///
/// A center is `c * walk + sqrt(1 - c^2) * iid` where `walk` accumulates one
/// Gaussian step per edge from the root and `iid` has the same per-leaf variance.
pub fn leaf_centers(cfg: &SynthConfig, t: &Taxonomy) -> Result<Vec<[f64; 12]>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut iid_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_1D1D);
    let mut mask = [0.0; 12];
    for &f in &cfg.informative {
        mask[f] = 1.0;
    }
    let mut walk: Vec<[f64; 12]> = Vec::with_capacity(t.len());
    for a in 0..t.len() {
        let step = normal_vec(&mut rng, 12, cfg.center_scale);
        let mut c = t.parent(a).map_or([0.0; 12], |p| walk[p]);
        for (v, s) in c.iter_mut().zip(step) {
            *v += s;
        }
        walk.push(c);
    }
    let (wc, wi) = (cfg.coupling, (1.0 - cfg.coupling * cfg.coupling).sqrt());
    Ok(t.leaves()
        .iter()
        .map(|&l| {
            let depth = t.classes()[l].depth as f64;
            let iid = normal_vec(&mut iid_rng, 12, cfg.center_scale * depth.sqrt());
            let mut c = [0.0; 12];
            for f in 0..12 {
                c[f] = mask[f] * (wc * walk[l][f] + wi * iid[f]);
            }
            c
        })
        .collect())
}

/// Leaf-labeled Gaussian mixtures whose centers follow the taxonomy.
pub fn synth_cohort(cfg: &SynthConfig) -> Result<Vec<CellTable>> {
    let t = cfg.taxonomy()?;
    let props = cfg.leaf_proportions(&t)?;
    let centers = leaf_centers(cfg, &t)?;
    let pick = WeightedIndex::new(&props).map_err(|e| Error::InvalidProportions(e.to_string()))?;
    let names: Vec<String> = t.leaves().iter().map(|&l| t.label(l).to_string()).collect();
    let width = cfg.patients.to_string().len().max(2);
    (0..cfg.patients)
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FF_EE00 ^ ((p as u64 + 1) << 20));
            let shift = normal_vec(&mut rng, 12, cfg.patient_shift);
            let mut values = Vec::with_capacity(cfg.cells_per_patient * 12);
            let mut labels = Vec::with_capacity(cfg.cells_per_patient);
            for _ in 0..cfg.cells_per_patient {
                let leaf = pick.sample(&mut rng);
                for f in 0..12 {
                    let noise: f64 = rng.sample(StandardNormal);
                    values.push(centers[leaf][f] + shift[f] + cfg.covariance_scale * noise);
                }
                labels.push(names[leaf].clone());
            }
            Ok(CellTable {
                patient_id: format!("P{:0width$}", p + 1),
                features: Tensor::new(cfg.cells_per_patient, 12, values)?,
                labels,
            })
        })
        .collect()
}

/// Patient-level outer folds with inner folds over each outer training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    /// Test patient indices per outer fold.
    pub outer: Vec<Vec<usize>>,
    /// For each outer fold, validation patient indices per inner fold.
    pub inner: Vec<Vec<Vec<usize>>>,
}

impl FoldPlan {
    /// Training patients of outer fold `f`, ascending.
    pub fn train(&self, f: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .outer
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, p)| p.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Sizes of a balanced partition of `n` into `parts`: the first `n % parts` get one extra.
pub fn balanced_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

fn partition(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for size in balanced_sizes(items.len(), parts) {
        let mut fold = items[start..start + size].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += size;
    }
    out
}

/// Seeded patient-level fold assignment over `patients` indices `0..patients`.
pub fn fold_plan(patients: usize, outer: usize, inner: usize, seed: u64) -> Result<FoldPlan> {
    if outer == 0 || patients < outer {
        return Err(Error::TooFewPatients {
            needed: outer.max(1),
            got: patients,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..patients).collect();
    order.shuffle(&mut rng);
    let outer_folds = partition(&order, outer);
    let plan_outer = outer_folds.clone();
    let inner_folds = (0..outer)
        .map(|f| {
            let mut train: Vec<usize> = order.iter().copied().filter(|p| !outer_folds[f].contains(p)).collect();
            train.shuffle(&mut rng);
            let parts = inner.min(train.len());
            if parts < 2 {
                Vec::new()
            } else {
                partition(&train, parts)
            }
        })
        .collect();
    Ok(FoldPlan {
        outer: plan_outer,
        inner: inner_folds,
    })
}

/// Generator record written next to a synthetic cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub generator: SynthConfig,
    pub taxonomy_spec: String,
    pub patients: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest.
    pub file: String,
    pub cells: usize,
}

/// Writes one CSV per patient plus `manifest.json` into `dir`.
pub fn write_cohort(dir: &Path, tables: &[CellTable], cfg: &SynthConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tables.len());
    for t in tables {
        let file = format!("{}.csv", t.patient_id);
        write_cells(&dir.join(&file), std::slice::from_ref(t))?;
        entries.push(ManifestEntry {
            id: t.patient_id.clone(),
            file,
            cells: t.len(),
        });
    }
    let manifest = CohortManifest {
        generator: cfg.clone(),
        taxonomy_spec: cfg.taxonomy()?.spec_string().to_string(),
        patients: entries,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every patient listed in a manifest.
pub fn load_manifest(path: &Path, t: &Taxonomy) -> Result<Vec<CellTable>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CohortManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in &manifest.patients {
        out.extend(load_cells(&base.join(&entry.file), t)?);
    }
    Ok(out)
}

/// Loads either a manifest (`.json`) or a single cells CSV.
pub fn load_cohort(path: &Path, t: &Taxonomy) -> Result<Vec<CellTable>> {
    if path.extension().is_some_and(|e| e == "json") {
        load_manifest(path, t)
    } else {
        load_cells(path, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::preset;
    use std::io::Write;

    fn header() -> String {
        let mut h = MARKERS.join(",");
        h.push_str(",label");
        h
    }

    #[test]
    fn loads_three_rows() {
        let t = preset("fc-deep").unwrap();
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(f, "{}", header()).unwrap();
        for label in ["NK cells", "CD4 T cells", "1_2"] {
            writeln!(f, "{},{label}", vec!["0.5"; 12].join(",")).unwrap();
        }
        let tables = load_cells(f.path(), &t).unwrap();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].len(), 3);
        assert_eq!(t.resolve(&tables[0].labels[0]).unwrap(), t.resolve("1.1.2").unwrap());
    }

    #[test]
    fn rejects_short_header_and_parental_labels() {
        let t = preset("fc-deep").unwrap();
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(f, "{},label", MARKERS[..11].join(",")).unwrap();
        writeln!(f, "{},B cells", vec!["1"; 11].join(",")).unwrap();
        assert!(matches!(load_cells(f.path(), &t), Err(Error::SchemaMismatch(_))));

        let mut g = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(g, "{}", header()).unwrap();
        writeln!(g, "{},Lymphocytes", vec!["1"; 12].join(",")).unwrap();
        assert!(matches!(load_cells(g.path(), &t), Err(Error::UnknownLabel(_))));

        let mut h = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        writeln!(h, "{}", header()).unwrap();
        writeln!(h, "{},inf,B cells", vec!["1"; 11].join(",")).unwrap();
        assert!(matches!(load_cells(h.path(), &t), Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn fold_sizes() {
        let sizes = |n| {
            let mut s: Vec<usize> = fold_plan(n, 7, 4, 1).unwrap().outer.iter().map(Vec::len).collect();
            s.sort_unstable_by(|a, b| b.cmp(a));
            s
        };
        assert_eq!(sizes(19), vec![3, 3, 3, 3, 3, 2, 2]);
        assert_eq!(sizes(30), vec![5, 5, 4, 4, 4, 4, 4]);
        assert_eq!(sizes(7), vec![1; 7]);
        assert!(matches!(fold_plan(6, 7, 4, 0), Err(Error::TooFewPatients { .. })));
    }

    #[test]
    fn folds_partition_patients() {
        let plan = fold_plan(19, 7, 4, 9).unwrap();
        let mut all: Vec<usize> = plan.outer.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..19).collect::<Vec<_>>());
        for f in 0..7 {
            let train = plan.train(f);
            assert!(train.iter().all(|p| !plan.outer[f].contains(p)));
            let mut inner: Vec<usize> = plan.inner[f].iter().flatten().copied().collect();
            inner.sort_unstable();
            assert_eq!(inner, train);
            assert_eq!(plan.inner[f].len(), 4);
        }
    }

    #[test]
    fn synth_is_reproducible_and_closed() {
        let cfg = SynthConfig {
            patients: 2,
            cells_per_patient: 300,
            seed: 5,
            ..Default::default()
        };
        let a = synth_cohort(&cfg).unwrap();
        assert_eq!(a, synth_cohort(&cfg).unwrap());
        let t = cfg.taxonomy().unwrap();
        for label in &a[0].labels {
            assert!(t.is_leaf(t.resolve(label).unwrap()));
        }
    }

    #[test]
    fn minority_support() {
        let cfg = SynthConfig {
            patients: 1,
            cells_per_patient: 100_000,
            minority: Some(("NK cells".into(), 0.001)),
            seed: 3,
            ..Default::default()
        };
        let tables = synth_cohort(&cfg).unwrap();
        let count = tables[0].labels.iter().filter(|l| *l == "NK cells").count() as f64;
        // 100 expected; 5 binomial standard deviations is about 50.
        assert!((count - 100.0).abs() < 50.0, "{count}");
    }

    fn dist(a: &[f64; 12], b: &[f64; 12]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn coupled_siblings_are_closer() {
        let t = preset("fc-deep").unwrap();
        let leaves = t.leaves().to_vec();
        let (mut sib, mut cross) = (0.0, 0.0);
        for seed in 0..20 {
            let cfg = SynthConfig {
                coupling: 0.9,
                seed,
                ..Default::default()
            };
            let centers = leaf_centers(&cfg, &t).unwrap();
            let (mut s, mut ns, mut c, mut nc) = (0.0, 0, 0.0, 0);
            for i in 0..leaves.len() {
                for j in i + 1..leaves.len() {
                    let d = dist(&centers[i], &centers[j]);
                    if t.parent(leaves[i]) == t.parent(leaves[j]) {
                        s += d;
                        ns += 1;
                    } else if t.ancestor_set(leaves[i]).unwrap().last() != t.ancestor_set(leaves[j]).unwrap().last() {
                        c += d;
                        nc += 1;
                    }
                }
            }
            sib += s / ns as f64;
            cross += c / nc as f64;
        }
        assert!(sib < cross, "{sib} vs {cross}");
    }

    #[test]
    fn zero_coupling_ignores_tree() {
        // Same leaf depths, different shape: siblings under 5 versus three separate parents.
        let shared = Taxonomy::parse("1,2,3,4,5,5_1,5_2,5_3").unwrap();
        let split = Taxonomy::parse("1,2,3,4,5_1,6_1,7_1").unwrap();
        let cfg = |coupling| SynthConfig {
            coupling,
            seed: 2,
            ..Default::default()
        };
        assert_eq!(
            leaf_centers(&cfg(0.0), &shared).unwrap(),
            leaf_centers(&cfg(0.0), &split).unwrap()
        );
        assert_ne!(
            leaf_centers(&cfg(0.5), &shared).unwrap(),
            leaf_centers(&cfg(0.5), &split).unwrap()
        );
    }

    #[test]
    fn proportions_validated() {
        let cfg = SynthConfig {
            proportions: Some(vec![0.5; 8]),
            ..Default::default()
        };
        assert!(matches!(synth_cohort(&cfg), Err(Error::InvalidProportions(_))));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = SynthConfig {
            patients: 2,
            cells_per_patient: 20,
            ..Default::default()
        };
        let tables = synth_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_cohort(dir.path(), &tables, &cfg).unwrap();
        let back = load_cohort(&manifest, &cfg.taxonomy().unwrap()).unwrap();
        assert_eq!(back, tables);
    }
}
