//! `fchc`: command-line driver for hierarchy-constrained cell classification.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use fchc_core::constraint::mcm;
use fchc_core::data::{load_cohort, synth_cohort, write_cohort, SynthConfig, MARKERS};
use fchc_core::graph::{build_patient_graphs, read_graph_cache, write_graph_cache};
use fchc_core::harness::{
    ablate, bench_constraint, evaluate_graphs, export_embeddings, feature_importance, run_cv, train, AblationCohort,
};
use fchc_core::taxonomy::lookup;
use fchc_core::{find_violations, Checkpoint, Error, ExperimentConfig, Result, ScoreMatrix, Standardization, Taxonomy};

// Training allocates and frees multi-megabyte tensors every step; the system
// allocator returns them to the OS and page-faults them back in.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "fchc", version, about = "Hierarchy-constrained cell classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on every patient of a cohort and save a checkpoint.
    Train(TrainArgs),
    /// Cross-validated evaluation; writes metrics.json and timings.json.
    Cv(CvArgs),
    /// Constrained vs flat runs on a deep and a shallow cohort.
    Ablate(AblateArgs),
    /// Apply the max constraint to a score CSV and report violations.
    Constrain(ConstrainArgs),
    /// kNN graph construction.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Permutation feature importance of a trained checkpoint.
    Importance(CheckpointArgs),
    /// Penultimate-layer embeddings of one patient as CSV.
    Embed(EmbedArgs),
    /// Time the constraint layer.
    Bench(BenchArgs),
    /// Print the parsed taxonomy as JSON.
    Taxonomy(HierarchyArgs),
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Build per-patient graphs and write an edge-list cache.
    Build(GraphArgs),
}

#[derive(Args, Clone, Default)]
struct HierarchyArgs {
    /// Hierarchy string such as "1,1_1,1_2".
    #[arg(long, conflicts_with = "hierarchy_preset")]
    hierarchy: Option<String>,
    /// Named hierarchy: fc-deep or fc-shallow.
    #[arg(long)]
    hierarchy_preset: Option<String>,
}

impl HierarchyArgs {
    fn key(&self) -> Option<&str> {
        self.hierarchy.as_deref().or(self.hierarchy_preset.as_deref())
    }

    fn taxonomy(&self, default: &str) -> Result<Taxonomy> {
        let key = self.key().unwrap_or(default);
        if self.hierarchy.is_some() {
            Taxonomy::parse(key)
        } else {
            lookup(key)
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON). Defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort: a manifest.json from `fchc synth` or a cell CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    hierarchy: HierarchyArgs,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(key) = self.hierarchy.key() {
            cfg.taxonomy = key.to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Seed; defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Optional CSV of the per-epoch loss.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Output directory; falls back to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate a single outer fold instead of all of them.
    #[arg(long)]
    no_cv: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort labeled under the deep hierarchy.
    #[arg(long)]
    deep: PathBuf,
    /// Cohort labeled under the shallow hierarchy.
    #[arg(long)]
    shallow: PathBuf,
    #[arg(long, default_value = "fc-deep")]
    deep_hierarchy: String,
    #[arg(long, default_value = "fc-shallow")]
    shallow_hierarchy: String,
    /// Comma-separated model presets.
    #[arg(long, value_delimiter = ',', default_value = "paper-gat")]
    models: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConstrainArgs {
    /// Raw scores: header of class names or paths, one row per sample.
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    hierarchy: HierarchyArgs,
    /// Constrained score CSV.
    #[arg(long)]
    out: PathBuf,
    /// Violations report of the input scores (JSON).
    #[arg(long)]
    violations: PathBuf,
}

#[derive(Args)]
struct GraphArgs {
    /// Cell CSV or cohort manifest.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value = "zscore")]
    standardization: Standardization,
    #[command(flatten)]
    hierarchy: HierarchyArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    hierarchy: HierarchyArgs,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    /// Minority leaf and its fraction, e.g. "NK cells=0.01".
    #[arg(long)]
    minority: Option<String>,
    /// Comma-separated informative feature indices.
    #[arg(long, value_delimiter = ',')]
    informative: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cohort to evaluate on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON; printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Patient id; the first patient when omitted.
    #[arg(long)]
    patient: Option<String>,
    /// Output CSV; printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    classes: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for bench.csv and bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

macro_rules! say_ln {
    ($($arg:tt)*) => {
        say(&format!("{}\n", format_args!($($arg)*)))?
    };
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DivergedLoss { .. } => 4,
        Error::Config(_) | Error::EmptySpec | Error::MalformedToken(_) | Error::UnknownPreset(_) => 2,
        _ => 3,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn say(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => say(text),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.exp.config()?;
    let t = cfg.taxonomy()?;
    let cohort = load_cohort(&a.exp.data, &t)?;
    let graphs = build_patient_graphs(&cohort, &t, cfg.k, cfg.standardization)?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let outcome = train(&graphs, &t, &cfg, seed)?;
    let (metrics, violations) = evaluate_graphs(&outcome.network, &graphs, &t, &cfg, cfg.threshold)?;
    if let Some(p) = &a.losses {
        let mut text = String::from("epoch,loss\n");
        for (e, l) in outcome.losses.iter().enumerate() {
            text.push_str(&format!("{e},{l}\n"));
        }
        write(p, &text)?;
    }
    let summary = json!({
        "config_hash": cfg.hash(),
        "seed": seed,
        "final_loss": outcome.losses.last(),
        "train_hf": metrics.hf,
        "violations": violations,
    });
    Checkpoint::new(&outcome.network, &cfg, &t, seed, Some(metrics)).save(&a.out)?;
    say_ln!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_cv(a: &CvArgs) -> Result<()> {
    let mut cfg = a.exp.config()?;
    if a.no_cv {
        cfg.folds.cross_validate = false;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    let t = cfg.taxonomy()?;
    let cohort = load_cohort(&a.exp.data, &t)?;
    let (record, timings) = run_cv(&cohort, &cfg)?;
    write(&out.join("metrics.json"), &serde_json::to_string_pretty(&record)?)?;
    write(&out.join("timings.json"), &serde_json::to_string_pretty(&timings)?)?;
    let mut per_class = String::from("class,recall_pct_mean,recall_pct_std\n");
    for (name, s) in &record.aggregate.per_class_recall {
        per_class.push_str(&format!("{name},{:.2},{:.2}\n", s.mean, s.std));
    }
    write(&out.join("per_class.csv"), &per_class)?;
    let g = &record.aggregate;
    say_ln!(
        "config {}: hp {:.4} hr {:.4} hf {:.4} ± {:.4} over {} runs",
        record.config_hash,
        g.hp.mean,
        g.hr.mean,
        g.hf.mean,
        g.hf.std,
        record.runs.len()
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cohorts = Vec::new();
    for (name, path, key) in [
        ("deep", &a.deep, &a.deep_hierarchy),
        ("shallow", &a.shallow, &a.shallow_hierarchy),
    ] {
        let t = lookup(key).map_err(|e| Error::Config(e.to_string()))?;
        let tables = load_cohort(path, &t)?;
        cohorts.push(AblationCohort::build(name, &tables, t, &base)?);
    }
    let report = ablate(&cohorts, &base, &a.models)?;
    write(&a.out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    write(&a.out.join("summary.csv"), &report.summary_csv())?;
    write(&a.out.join("per_class.csv"), &report.per_class_csv())?;
    for model in &a.models {
        say_ln!(
            "{model}: hf gap deep {:.4}, shallow {:.4}",
            report.gap("deep", model)?,
            report.gap("shallow", model)?
        );
    }
    Ok(())
}

fn cmd_constrain(a: &ConstrainArgs) -> Result<()> {
    let t = a.hierarchy.taxonomy("fc-deep")?;
    let mut reader = csv::Reader::from_path(&a.scores)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let columns: Vec<usize> = header.iter().map(|h| t.resolve(h)).collect::<Result<_>>()?;
    let mut sorted = columns.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != t.len() || columns.len() != t.len() {
        return Err(Error::SchemaMismatch(format!(
            "score columns must name each of the {} classes exactly once",
            t.len()
        )));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec?;
        let mut row = vec![0.0; t.len()];
        for (field, &c) in rec.iter().zip(&columns) {
            row[c] = field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::SchemaMismatch(format!("row {rows}: {e}")))?;
        }
        values.extend(row);
        rows += 1;
    }
    let h = ScoreMatrix::for_taxonomy(&t, rows, values)?;
    let violations = find_violations(&h, &t)?;
    let s = mcm(&h, t.descendants())?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(&header)?;
    for i in 0..rows {
        w.write_record(columns.iter().map(|&c| s.get(i, c).to_string()))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let max_gap = violations.iter().map(|v| v.gap).fold(0.0, f64::max);
    let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for v in &violations {
        *pairs.entry((v.ancestor, v.descendant)).or_default() += 1;
    }
    let report = json!({
        "count": violations.len(),
        "max_gap": max_gap,
        "pairs": pairs.iter().map(|((a, d), n)| json!({
            "ancestor": t.label(*a),
            "descendant": t.label(*d),
            "samples": n,
        })).collect::<Vec<_>>(),
        "after_constraint": find_violations(&s, &t)?.len(),
    });
    write(&a.violations, &serde_json::to_string_pretty(&report)?)?;
    say_ln!("{} violations in {rows} rows, max gap {max_gap}", violations.len());
    Ok(())
}

fn cmd_graph_build(a: &GraphArgs) -> Result<()> {
    let t = a.hierarchy.taxonomy("fc-deep")?;
    let cohort = load_cohort(&a.input, &t)?;
    if read_graph_cache(&a.out, &cohort, a.k, a.standardization)?.is_some() {
        say_ln!("graph cache in {} is up to date", a.out.display());
        return Ok(());
    }
    let graphs = build_patient_graphs(&cohort, &t, a.k, a.standardization)?;
    write_graph_cache(&a.out, &cohort, &graphs, a.k, a.standardization)?;
    let edges: usize = graphs.iter().map(|g| g.adjacency.edge_count()).sum();
    say_ln!("{} graphs, {edges} edges written to {}", graphs.len(), a.out.display());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(key) = a.hierarchy.key() {
        cfg.taxonomy = key.to_string();
    }
    if let Some(v) = a.patients {
        cfg.patients = v;
    }
    if let Some(v) = a.cells {
        cfg.cells_per_patient = v;
    }
    if let Some(v) = &a.informative {
        cfg.informative = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(m) = &a.minority {
        let (name, frac) = m
            .rsplit_once('=')
            .ok_or_else(|| Error::Config(format!("--minority expects NAME=FRACTION, got {m:?}")))?;
        let frac = frac
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("--minority fraction: {e}")))?;
        cfg.minority = Some((name.trim().to_string(), frac));
    }
    cfg.taxonomy().map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let tables = synth_cohort(&cfg)?;
    let manifest = write_cohort(&a.out, &tables, &cfg)?;
    say_ln!("{}", manifest.display());
    Ok(())
}

fn load_checkpoint(path: &Path, data: &Path) -> Result<(Checkpoint, Taxonomy, Vec<fchc_core::CellGraph>)> {
    let ck = Checkpoint::load(path)?;
    let t = ck.taxonomy()?;
    let cohort = load_cohort(data, &t)?;
    let graphs = build_patient_graphs(&cohort, &t, ck.config.k, ck.config.standardization)?;
    Ok((ck, t, graphs))
}

fn cmd_importance(a: &CheckpointArgs) -> Result<()> {
    let (ck, t, graphs) = load_checkpoint(&a.checkpoint, &a.data)?;
    let net = ck.network()?;
    let imp = feature_importance(&net, &graphs, &t, &ck.config, a.seed)?;
    let mut ranked: Vec<usize> = (0..imp.len()).collect();
    ranked.sort_by(|&x, &y| imp[y].total_cmp(&imp[x]).then(x.cmp(&y)));
    let report = json!({
        "markers": MARKERS,
        "importance": imp,
        "ranking": ranked.iter().map(|&i| MARKERS[i]).collect::<Vec<_>>(),
    });
    emit(
        a.out.as_deref(),
        &format!("{}\n", serde_json::to_string_pretty(&report)?),
    )
}

fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let (ck, t, graphs) = load_checkpoint(&a.checkpoint, &a.data)?;
    let graph = match &a.patient {
        Some(id) => graphs
            .iter()
            .find(|g| &g.patient_id == id)
            .ok_or_else(|| Error::EmptyPatient(id.clone()))?,
        None => graphs.first().ok_or_else(|| Error::EmptyPatient("cohort".into()))?,
    };
    emit(a.out.as_deref(), &export_embeddings(&ck.network()?, graph, &t)?)
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let report = bench_constraint(&a.classes, a.samples, a.seed)?;
    if let Some(dir) = &a.out {
        write(&dir.join("bench.csv"), &report.to_csv())?;
        write(&dir.join("bench.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    say(&report.to_csv())?;
    say_ln!("sparse exponent {:.3} (vs pairs), dense exponent {:.3} (vs classes), constraint overhead {:.2}% of a forward pass",
        report.sparse_exponent, report.dense_exponent, report.constraint_overhead_pct
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Constrain(a) => cmd_constrain(a),
        Command::Graph {
            command: GraphCommand::Build(a),
        } => cmd_graph_build(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Importance(a) => cmd_importance(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Taxonomy(a) => {
            let t = a.taxonomy("fc-deep")?;
            say_ln!("{}", serde_json::to_string_pretty(&t.to_export())?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("FCHC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: FCHC_THREADS: {e}");
            return ExitCode::from(2);
        }
        info!("using {n} worker threads");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
