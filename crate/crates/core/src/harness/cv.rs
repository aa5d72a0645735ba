use std::collections::BTreeMap;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{pooled_scores, train};
use crate::data::{fold_plan, CellTable};
use crate::error::{Error, Result};
use crate::graph::{build_patient_graphs, CellGraph};
use crate::metrics::{evaluate, MetricsReport};
use crate::taxonomy::Taxonomy;

/// One trained-and-tested model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub fold: usize,
    pub seed: u64,
    pub threshold: f64,
    pub learning_rate: f64,
    pub test_patients: Vec<String>,
    pub final_loss: f64,
    /// Hierarchy violations in the evaluated scores.
    pub violations: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Stat::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub hp: Stat,
    pub hr: Stat,
    pub hf: Stat,
    pub flat_f1: Stat,
    /// Mean over folds of the spread of hf across seeds.
    pub hf_std_over_seeds: f64,
    /// Spread across folds of the seed-averaged hf.
    pub hf_std_over_folds: f64,
    /// Threshold-based recall per class, over runs where the class has support.
    pub per_class_recall: BTreeMap<String, Stat>,
}

/// Everything measured for one configuration. Contains no timings, so equal
/// inputs give byte-identical JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub taxonomy_spec: String,
    pub runs: Vec<RunEntry>,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub fold: usize,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub config_hash: String,
    pub runs: Vec<RunTiming>,
    pub total_seconds: f64,
}

impl RunRecord {
    /// Runs of one seed.
    pub fn seed_runs(&self, seed: u64) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(move |r| r.seed == seed)
    }

    /// Mean of `f` over the folds of each seed.
    pub fn per_seed(&self, f: impl Fn(&RunEntry) -> f64) -> BTreeMap<u64, f64> {
        let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in &self.runs {
            let e = acc.entry(r.seed).or_default();
            e.0 += f(r);
            e.1 += 1;
        }
        acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
    }
}

/// Aggregates per-run entries.
pub fn aggregate(runs: &[RunEntry]) -> Aggregate {
    let col = |f: &dyn Fn(&RunEntry) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let mut by_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in runs {
        by_fold.entry(r.fold).or_default().push(r.metrics.hf);
    }
    let over_seeds = Stat::of(&by_fold.values().map(|v| Stat::of(v).std).collect::<Vec<_>>()).mean;
    let fold_means: Vec<f64> = by_fold.values().map(|v| Stat::of(v).mean).collect();
    let mut per_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (name, e) in &r.metrics.per_class {
            if e.support > 0 {
                per_class.entry(name.clone()).or_default().push(e.recall_pct);
            }
        }
    }
    Aggregate {
        hp: Stat::of(&col(&|r| r.metrics.hp)),
        hr: Stat::of(&col(&|r| r.metrics.hr)),
        hf: Stat::of(&col(&|r| r.metrics.hf)),
        flat_f1: Stat::of(&col(&|r| r.metrics.flat.f1)),
        hf_std_over_seeds: over_seeds,
        hf_std_over_folds: Stat::of(&fold_means).std,
        per_class_recall: per_class.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect(),
    }
}

fn pick(graphs: &[CellGraph], idx: &[usize]) -> Vec<CellGraph> {
    idx.iter().map(|&i| graphs[i].clone()).collect()
}

/// Chooses `(threshold, learning rate)` by mean inner-fold hf; earlier grid entries win ties.
fn select(
    graphs: &[CellGraph],
    train_idx: &[usize],
    inner: &[Vec<usize>],
    t: &Taxonomy,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if !cfg.grid.enabled || inner.len() < 2 {
        return Ok((cfg.threshold, cfg.optimizer.learning_rate));
    }
    let mut best = (f64::NEG_INFINITY, cfg.threshold, cfg.optimizer.learning_rate);
    for &lr in &cfg.grid.learning_rates {
        let mut c = cfg.clone();
        c.optimizer.learning_rate = lr;
        let mut sums = vec![0.0; cfg.grid.thresholds.len()];
        for val in inner {
            let fit: Vec<usize> = train_idx.iter().copied().filter(|p| !val.contains(p)).collect();
            let model = train(&pick(graphs, &fit), t, &c, seed)?;
            let (scores, truth) = pooled_scores(&model.network, &pick(graphs, val), t, &c)?;
            for (k, &th) in cfg.grid.thresholds.iter().enumerate() {
                sums[k] += evaluate(&scores, &truth, t, th)?.hf;
            }
        }
        for (k, &th) in cfg.grid.thresholds.iter().enumerate() {
            if sums[k] > best.0 {
                best = (sums[k], th, lr);
            }
        }
    }
    Ok((best.1, best.2))
}

/// Builds graphs and runs [`run_cv_graphs`].
pub fn run_cv(cohort: &[CellTable], cfg: &ExperimentConfig) -> Result<(RunRecord, Timings)> {
    cfg.validate()?;
    let t = cfg.taxonomy()?;
    let graphs = build_patient_graphs(cohort, &t, cfg.k, cfg.standardization)?;
    run_cv_graphs(&graphs, &t, cfg)
}

/// Outer folds × seeds, each trained on its fold's training patients and
/// tested once on the held-out ones. Jobs run in parallel and are collected
/// in (fold, seed) order.
pub fn run_cv_graphs(graphs: &[CellGraph], t: &Taxonomy, cfg: &ExperimentConfig) -> Result<(RunRecord, Timings)> {
    let start = Instant::now();
    let plan = fold_plan(graphs.len(), cfg.folds.outer, cfg.folds.inner, cfg.folds.seed)?;
    let folds: Vec<usize> = if cfg.folds.cross_validate {
        (0..cfg.folds.outer).collect()
    } else {
        vec![0]
    };
    let jobs: Vec<(usize, u64)> = folds
        .iter()
        .flat_map(|&f| cfg.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let results: Vec<Result<(RunEntry, RunTiming)>> = jobs
        .par_iter()
        .map(|&(fold, seed)| {
            let job_start = Instant::now();
            let train_idx = plan.train(fold);
            let (threshold, lr) = select(graphs, &train_idx, &plan.inner[fold], t, cfg, seed)?;
            let mut c = cfg.clone();
            c.optimizer.learning_rate = lr;
            let model = train(&pick(graphs, &train_idx), t, &c, seed)?;
            let test = pick(graphs, &plan.outer[fold]);
            let (scores, truth) = pooled_scores(&model.network, &test, t, &c)?;
            let violations = crate::constraint::find_violations(&scores, t)?.len();
            let metrics = evaluate(&scores, &truth, t, threshold)?;
            info!(
                "fold {fold} seed {seed}: hf {:.4} (threshold {threshold}, lr {lr})",
                metrics.hf
            );
            let entry = RunEntry {
                fold,
                seed,
                threshold,
                learning_rate: lr,
                test_patients: test.iter().map(|g| g.patient_id.clone()).collect(),
                final_loss: model.losses.last().copied().unwrap_or(f64::NAN),
                violations,
                metrics,
            };
            let timing = RunTiming {
                fold,
                seed,
                seconds: job_start.elapsed().as_secs_f64(),
            };
            Ok((entry, timing))
        })
        .collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut timings = Vec::with_capacity(results.len());
    for r in results {
        let (e, tm) = r?;
        runs.push(e);
        timings.push(tm);
    }
    let hash = cfg.hash();
    let record = RunRecord {
        config_hash: hash.clone(),
        config: cfg.clone(),
        taxonomy_spec: t.spec_string().to_string(),
        aggregate: aggregate(&runs),
        runs,
    };
    let timings = Timings {
        config_hash: hash,
        runs: timings,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((record, timings))
}

/// A labeled cohort under its taxonomy.
pub struct AblationCohort {
    pub name: String,
    pub taxonomy: Taxonomy,
    pub graphs: Vec<CellGraph>,
}

impl AblationCohort {
    pub fn build(name: &str, tables: &[CellTable], taxonomy: Taxonomy, cfg: &ExperimentConfig) -> Result<Self> {
        let graphs = build_patient_graphs(tables, &taxonomy, cfg.k, cfg.standardization)?;
        Ok(AblationCohort {
            name: name.into(),
            taxonomy,
            graphs,
        })
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub cohort: String,
    pub model: String,
    /// MCLoss plus constrained inference when true; cross-entropy with no constraint otherwise.
    pub constrained: bool,
    pub record: RunRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<AblationArm>,
}

/// Runs {constrained, flat} × cohorts × models with otherwise identical settings.
pub fn ablate(cohorts: &[AblationCohort], base: &ExperimentConfig, models: &[String]) -> Result<AblationReport> {
    let mut arms = Vec::new();
    for cohort in cohorts {
        for model in models {
            for constrained in [true, false] {
                let mut cfg = ExperimentConfig {
                    taxonomy: cohort.taxonomy.spec_string().to_string(),
                    model: model.clone(),
                    ..base.clone()
                };
                if constrained {
                    cfg.loss = crate::loss::LossKind::Mcloss;
                    cfg.use_constraint_at_inference = true;
                } else {
                    cfg = cfg.flat();
                }
                let (record, _) = run_cv_graphs(&cohort.graphs, &cohort.taxonomy, &cfg)?;
                arms.push(AblationArm {
                    cohort: cohort.name.clone(),
                    model: model.clone(),
                    constrained,
                    record,
                });
            }
        }
    }
    Ok(AblationReport { arms })
}

impl AblationReport {
    pub fn arm(&self, cohort: &str, model: &str, constrained: bool) -> Result<&AblationArm> {
        self.arms
            .iter()
            .find(|a| a.cohort == cohort && a.model == model && a.constrained == constrained)
            .ok_or_else(|| Error::Config(format!("no ablation arm {cohort}/{model}/{constrained}")))
    }

    /// `hf` of the constrained arm minus the flat arm's macro F1, averaged over runs.
    pub fn gap(&self, cohort: &str, model: &str) -> Result<f64> {
        let c = self.arm(cohort, model, true)?;
        let f = self.arm(cohort, model, false)?;
        Ok(c.record.aggregate.hf.mean - f.record.aggregate.flat_f1.mean)
    }

    /// Hierarchical and flat scores per arm.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("cohort,model,arm,hp,hr,hf,hf_std,precision,recall,f1,violations\n");
        for a in &self.arms {
            let g = &a.record.aggregate;
            let mean_flat =
                |f: fn(&RunEntry) -> f64| a.record.runs.iter().map(f).sum::<f64>() / a.record.runs.len().max(1) as f64;
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
                a.cohort,
                a.model,
                if a.constrained { "fchc" } else { "flat" },
                g.hp.mean,
                g.hr.mean,
                g.hf.mean,
                g.hf.std,
                mean_flat(|r| r.metrics.flat.p),
                mean_flat(|r| r.metrics.flat.r),
                g.flat_f1.mean,
                a.record.runs.iter().map(|r| r.violations).sum::<usize>(),
            ));
        }
        out
    }

    /// Per-class recall of both arms side by side.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("cohort,model,class,fchc_recall_pct,flat_recall_pct\n");
        for a in self.arms.iter().filter(|a| a.constrained) {
            let Ok(flat) = self.arm(&a.cohort, &a.model, false) else {
                continue;
            };
            for (name, s) in &a.record.aggregate.per_class_recall {
                let other = flat.record.aggregate.per_class_recall.get(name).map_or(0.0, |s| s.mean);
                out.push_str(&format!(
                    "{},{},{},{:.2},{:.2}\n",
                    a.cohort, a.model, name, s.mean, other
                ));
            }
        }
        out
    }
}
