//! `geom` command line: synthesize registries, build curricula, train
//! the four regimes, evaluate checkpoints, audit label overlap, and
//! emit plot data. Exit codes: 0 success, 2 config error, 3 runtime
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use geom_core::curricula::{
    self, CovMode, CurriculumOrder, DifficultyScore, OtSolver, OtddConfig, ProbeConfig, Strategy,
};
use geom_core::data::{
    load_registry, loo_partition, split_classes, write_dataset, ClassSplit, DatasetRecord,
    Registry, RegistryFile, SyntheticSpec,
};
use geom_core::episodes::{EpisodePool, EpisodeShape, SampleMode, SplitUse};
use geom_core::metrics::{aggregate, bwt, heatmap_deltas};
use geom_core::net::{load_checkpoint, save_checkpoint, FeatMode, ModelConfig};
use geom_core::report::{write_plot_csv, write_tasks_csv, PlotRow, RunReport, TaskRow};
use geom_core::train::{
    evaluate, train_offline, train_sequential, Allocation, Regime, TrainPlan,
};
use geom_core::{audit, Error};

#[derive(Parser)]
#[command(name = "geom", version, about = "Meta-learned in-context learner: data, curricula, training regimes, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain registry.
    Synth(Common),
    /// Train one of the regimes across a seed list.
    Train {
        #[command(flatten)]
        common: Common,
        /// Named preset: loo, merged, sequential-static,
        /// sequential-proportional, unsupervised.
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the config seed list.
        #[arg(long, num_args = 1..)]
        seed: Vec<u64>,
        /// Held-out domain (leave-one-out evaluation target).
        #[arg(long)]
        held_out: Option<String>,
        /// Curriculum order file (sequential presets).
        #[arg(long)]
        curriculum: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on fresh episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Correct-fraction of context labels at test time.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Compute difficulty scores / OT distances and a dataset order.
    Curriculum(Common),
    /// Class-overlap audit between label vocabularies.
    Audit(Common),
    /// Emit long-form plot CSVs from existing reports.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(code) = check_thread_cap() {
        return code;
    }
    let result = match cli.command {
        Command::Synth(c) => cmd_synth(&c),
        Command::Train {
            common,
            preset,
            seed,
            held_out,
            curriculum,
        } => cmd_train(&common, preset.as_deref(), &seed, held_out, curriculum),
        Command::Eval { common, noise } => cmd_eval(&common, noise),
        Command::Curriculum(c) => cmd_curriculum(&c),
        Command::Audit(c) => cmd_audit(&c),
        Command::Report(c) => cmd_report(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Json { .. } | Error::Invalid(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

/// `GEOM_THREADS` caps worker parallelism; seed runs execute serially
/// here, so any positive value is within the cap.
fn check_thread_cap() -> Result<(), ExitCode> {
    if let Ok(v) = std::env::var("GEOM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {}
            _ => {
                eprintln!("error: GEOM_THREADS must be a positive integer, got `{v}`");
                return Err(ExitCode::from(2));
            }
        }
    }
    Ok(())
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| {
        Error::Config(format!("{}: {e}", path.display()))
    })
}

fn ensure_out(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(c: &Common) -> Result<(), Error> {
    let spec: SyntheticSpec = read_config(&c.config)?;
    spec.validate()?;
    ensure_out(&c.out)?;
    let records = geom_core::data::synth_generate(&spec)?;
    let mut paths = Vec::new();
    for rec in &records {
        let dir = c.out.join(&rec.id);
        ensure_out(&dir)?;
        write_dataset(rec, &dir)?;
        paths.push(PathBuf::from(&rec.id));
    }
    let registry = RegistryFile {
        seed: spec.seed,
        datasets: paths,
    };
    let reg_path = c.out.join("registry.json");
    let mut bytes = serde_json::to_vec_pretty(&registry).map_err(|e| Error::Json {
        path: reg_path.clone(),
        source: e,
    })?;
    bytes.push(b'\n');
    fs::write(&reg_path, bytes).map_err(|e| Error::io(&reg_path, e))?;
    let payload = json!({
        "datasets": records.iter().map(|r| json!({
            "id": r.id, "domain": r.domain, "classes": r.classes.len(),
            "samples": r.total_samples(),
        })).collect::<Vec<_>>(),
        "registry": "registry.json",
    });
    let report = RunReport::new("synth", serde_json::to_value(&spec).unwrap(), payload);
    report.write(&c.out.join("report.json"))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn default_epoch_len() -> usize {
    500
}
fn default_shape() -> (usize, usize, usize) {
    (5, 5, 10)
}
fn default_eval_tasks() -> usize {
    200
}
fn default_val_tasks() -> usize {
    50
}
fn default_peak_lr() -> f32 {
    3e-4
}
fn default_warmup() -> f64 {
    0.05
}
fn default_aug_strength() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_min_eval() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    #[serde(default)]
    trainable_encoder: bool,
    #[serde(default)]
    feat_width: Option<usize>,
    #[serde(default)]
    label_width: Option<usize>,
    #[serde(default)]
    n_layers: Option<usize>,
    #[serde(default)]
    n_heads: Option<usize>,
    #[serde(default)]
    mlp_width: Option<usize>,
}

impl ModelSpec {
    fn build(&self, feat_in: usize, n_ways: usize) -> Result<ModelConfig, Error> {
        let mut cfg = ModelConfig::desk(feat_in, 0);
        if self.trainable_encoder {
            cfg.feat_mode = FeatMode::TrainableMlp;
            cfg.feat_width = self.feat_width.unwrap_or(32);
        } else if let Some(w) = self.feat_width {
            if w != feat_in {
                return Err(Error::Config(format!(
                    "feat_width {w} requires trainable_encoder (registry dim is {feat_in})"
                )));
            }
        }
        if let Some(v) = self.label_width {
            cfg.label_width = v;
        }
        if let Some(v) = self.n_layers {
            cfg.n_layers = v;
        }
        if let Some(v) = self.n_heads {
            cfg.n_heads = v;
        }
        if let Some(v) = self.mlp_width {
            cfg.mlp_width = v;
        }
        cfg.n_ways_max = n_ways;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            trainable_encoder: false,
            feat_width: None,
            label_width: None,
            n_layers: None,
            n_heads: None,
            mlp_width: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    registry: PathBuf,
    #[serde(default)]
    regime: Option<Regime>,
    iterations_total: usize,
    #[serde(default = "default_epoch_len")]
    epoch_len: usize,
    #[serde(default)]
    n_ways: Option<usize>,
    #[serde(default)]
    k_shots: Option<usize>,
    #[serde(default)]
    n_queries: Option<usize>,
    #[serde(default)]
    allocation: Option<Allocation>,
    #[serde(default)]
    curriculum: Option<PathBuf>,
    #[serde(default)]
    held_out: Option<String>,
    #[serde(default = "default_eval_tasks")]
    eval_tasks: usize,
    #[serde(default = "default_val_tasks")]
    val_tasks_per_dataset: usize,
    #[serde(default = "default_peak_lr")]
    peak_lr: f32,
    #[serde(default = "default_warmup")]
    warmup_fraction: f64,
    #[serde(default = "default_aug_strength")]
    aug_strength: f64,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    model: ModelSpec,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    #[serde(default = "default_min_eval")]
    min_eval: usize,
}

fn apply_preset(cfg: &mut TrainConfig, preset: &str) -> Result<(), Error> {
    match preset {
        "loo" => cfg.regime = Some(Regime::OfflineLoo),
        "merged" => cfg.regime = Some(Regime::OfflineMerged),
        "unsupervised" => cfg.regime = Some(Regime::Unsupervised),
        "sequential-static" => {
            cfg.regime = Some(Regime::Sequential);
            cfg.allocation = Some(Allocation::Static);
        }
        "sequential-proportional" => {
            cfg.regime = Some(Regime::Sequential);
            cfg.allocation = Some(Allocation::Proportional);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected loo, merged, sequential-static, sequential-proportional, unsupervised)"
            )))
        }
    }
    Ok(())
}

fn splits_for(
    registry: &Registry,
    test_fraction: f64,
    min_eval: usize,
) -> Result<BTreeMap<String, ClassSplit>, Error> {
    registry
        .records
        .iter()
        .map(|r| Ok((r.id.clone(), split_classes(r, test_fraction, min_eval)?)))
        .collect()
}

fn cmd_train(
    common: &Common,
    preset: Option<&str>,
    seed_override: &[u64],
    held_out: Option<String>,
    curriculum: Option<PathBuf>,
) -> Result<(), Error> {
    let mut cfg: TrainConfig = read_config(&common.config)?;
    if let Some(p) = preset {
        apply_preset(&mut cfg, p)?;
    }
    if !seed_override.is_empty() {
        cfg.seeds = seed_override.to_vec();
    }
    if held_out.is_some() {
        cfg.held_out = held_out;
    }
    if curriculum.is_some() {
        cfg.curriculum = curriculum;
    }
    let regime = cfg
        .regime
        .ok_or_else(|| Error::Config("no regime: set `regime` in the config or pass --preset".into()))?;

    let registry = load_registry(&cfg.registry)?;
    let shape = EpisodeShape::new(
        cfg.n_ways.unwrap_or(default_shape().0),
        cfg.k_shots.unwrap_or(default_shape().1),
        cfg.n_queries.unwrap_or(default_shape().2),
    );
    let dim = registry
        .records
        .first()
        .ok_or_else(|| Error::Config("empty registry".into()))?
        .dim;
    let model_cfg = cfg.model.build(dim, shape.n_ways)?;

    let mut plan = TrainPlan::new(regime, cfg.iterations_total, shape);
    plan.epoch_len = cfg.epoch_len;
    plan.eval_tasks = cfg.eval_tasks;
    plan.val_tasks_per_dataset = cfg.val_tasks_per_dataset;
    plan.peak_lr = cfg.peak_lr;
    plan.warmup_fraction = cfg.warmup_fraction;
    plan.aug_strength = cfg.aug_strength;
    plan.seeds = cfg.seeds.clone();
    if let Some(a) = cfg.allocation {
        plan.allocation = a;
    }

    ensure_out(&common.out)?;
    let config_echo = serde_json::to_value(&cfg).unwrap();

    if regime == Regime::Sequential {
        let cur_path = cfg.curriculum.as_ref().ok_or_else(|| {
            Error::Config("sequential preset needs --curriculum <order file>".into())
        })?;
        let order: CurriculumOrder = read_config(cur_path)?;
        plan.dataset_order = Some(order.order.clone());
        plan.validate()?;
        let splits = splits_for(&registry, cfg.test_fraction, cfg.min_eval)?;
        let mut per_seed = Vec::new();
        let mut bwts = Vec::new();
        let mut rows = Vec::new();
        for &seed in &plan.seeds {
            let seed_dir = common.out.join(format!("seed-{seed}"));
            ensure_out(&seed_dir)?;
            let run = train_sequential(
                &plan,
                &registry.records,
                &splits,
                &model_cfg,
                seed,
                &seed_dir,
                true,
            )?;
            let matrix = run.matrix.expect("per-stage evaluation enabled");
            let run_bwt = bwt(&matrix)?;
            bwts.push(vec![run_bwt]);
            let deltas = heatmap_deltas(&matrix)?;
            let last = matrix.n_tasks() - 1;
            for (task, id) in order.order.iter().enumerate() {
                rows.push(TaskRow {
                    run: seed,
                    tag: id.clone(),
                    task,
                    accuracy: matrix.get(last, task).unwrap(),
                });
            }
            per_seed.push(json!({
                "seed": seed,
                "allocations": run.allocations,
                "bwt": run_bwt,
                "matrix": serde_json::to_value(&matrix).unwrap(),
                "heatmap": serde_json::to_value(&deltas).unwrap(),
                "checkpoints": serde_json::to_value(&run.checkpoints).unwrap(),
            }));
        }
        let agg = aggregate(&bwts)?;
        let payload = json!({
            "regime": regime,
            "order": order.order,
            "per_seed": per_seed,
            "bwt_aggregate": serde_json::to_value(&agg).unwrap(),
        });
        write_tasks_csv(&common.out.join("tasks.csv"), &rows)?;
        RunReport::new("train", config_echo, payload).write(&common.out.join("report.json"))
    } else {
        let held = cfg
            .held_out
            .clone()
            .ok_or_else(|| Error::Config("offline training needs --held-out <domain>".into()))?;
        let partition = loo_partition(&registry.records, &held)?;
        plan.validate()?;
        let mut per_seed = Vec::new();
        let mut runs_accs = Vec::new();
        let mut rows = Vec::new();
        for &seed in &plan.seeds {
            let run = train_offline(
                &plan,
                &registry.records,
                &partition,
                None,
                &model_cfg,
                SplitUse::All,
                seed,
            )?;
            let ckpt = common.out.join(format!("ckpt-seed-{seed}.bin"));
            save_checkpoint(&ckpt, &run.params, run.best_step)?;
            for (task, &acc) in run.heldout_accuracy.iter().enumerate() {
                rows.push(TaskRow {
                    run: seed,
                    tag: "heldout".into(),
                    task,
                    accuracy: acc,
                });
            }
            per_seed.push(json!({
                "seed": seed,
                "best_step": run.best_step,
                "best_val_accuracy": run.best_val_accuracy,
                "val_history": serde_json::to_value(&run.val_history).unwrap(),
                "checkpoint": ckpt.file_name().unwrap().to_string_lossy(),
                "heldout_mean": run.heldout_accuracy.iter().sum::<f64>()
                    / run.heldout_accuracy.len().max(1) as f64,
            }));
            runs_accs.push(run.heldout_accuracy);
        }
        let agg = aggregate(&runs_accs)?;
        let payload = json!({
            "regime": regime,
            "held_out": partition.held_out_domain,
            "per_seed": per_seed,
            "aggregate": serde_json::to_value(&agg).unwrap(),
        });
        write_tasks_csv(&common.out.join("tasks.csv"), &rows)?;
        RunReport::new("train", config_echo, payload).write(&common.out.join("report.json"))
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    registry: PathBuf,
    checkpoint: PathBuf,
    #[serde(default = "default_eval_tasks")]
    tasks: usize,
    #[serde(default)]
    n_ways: Option<usize>,
    #[serde(default)]
    k_shots: Option<usize>,
    #[serde(default)]
    n_queries: Option<usize>,
    /// train | test | all
    #[serde(default)]
    split: Option<SplitUse>,
    #[serde(default)]
    held_out: Option<String>,
    #[serde(default)]
    noise: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    #[serde(default = "default_min_eval")]
    min_eval: usize,
}

fn cmd_eval(common: &Common, noise_flag: Option<f64>) -> Result<(), Error> {
    let mut cfg: EvalConfig = read_config(&common.config)?;
    if noise_flag.is_some() {
        cfg.noise = noise_flag;
    }
    if let Some(n) = cfg.noise {
        if !(0.0..=1.0).contains(&n) {
            return Err(Error::Config(format!(
                "noise (correct fraction) must be in [0,1], got {n}"
            )));
        }
    }
    let registry = load_registry(&cfg.registry)?;
    let (params, step) = load_checkpoint(&cfg.checkpoint)?;
    let shape = EpisodeShape::new(
        cfg.n_ways.unwrap_or(default_shape().0),
        cfg.k_shots.unwrap_or(default_shape().1),
        cfg.n_queries.unwrap_or(default_shape().2),
    );
    let split = cfg.split.unwrap_or(SplitUse::All);
    let records: Vec<&DatasetRecord> = registry
        .records
        .iter()
        .filter(|r| cfg.held_out.as_ref().is_none_or(|d| &r.domain == d))
        .collect();
    if records.is_empty() {
        return Err(Error::Config("no datasets match the eval filter".into()));
    }
    let splits = splits_for(&registry, cfg.test_fraction, cfg.min_eval)?;
    let pool = EpisodePool::with_splits(records, &splits);
    let accs = evaluate(
        &params,
        &pool,
        SampleMode::Single,
        shape,
        cfg.tasks,
        split,
        cfg.noise,
        cfg.seed,
    )?;
    ensure_out(&common.out)?;
    let rows: Vec<TaskRow> = accs
        .iter()
        .enumerate()
        .map(|(task, &accuracy)| TaskRow {
            run: cfg.seed,
            tag: "eval".into(),
            task,
            accuracy,
        })
        .collect();
    write_tasks_csv(&common.out.join("tasks.csv"), &rows)?;
    let agg = aggregate(&[accs.clone()])?;
    let payload = json!({
        "checkpoint_step": step,
        "accuracies": accs,
        "aggregate": serde_json::to_value(&agg).unwrap(),
    });
    RunReport::new("eval", serde_json::to_value(&cfg).unwrap(), payload)
        .write(&common.out.join("report.json"))
}

// ---------------------------------------------------------------------------
// curriculum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurriculumConfig {
    registry: PathBuf,
    strategy: Strategy,
    #[serde(default)]
    start: Option<String>,
    #[serde(default)]
    solver: Option<OtSolver>,
    #[serde(default)]
    epsilon: Option<f64>,
    #[serde(default)]
    max_iter: Option<usize>,
    #[serde(default)]
    cov_mode: Option<CovMode>,
    #[serde(default)]
    probe_epochs: Option<usize>,
    #[serde(default)]
    probe_seed: Option<u64>,
    #[serde(default)]
    domain_order: Option<Vec<String>>,
    /// Proxy-to-full dataset id mapping applied to the final order.
    #[serde(default)]
    proxy_mapping: Option<BTreeMap<String, String>>,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    #[serde(default = "default_min_eval")]
    min_eval: usize,
}

fn cmd_curriculum(common: &Common) -> Result<(), Error> {
    let cfg: CurriculumConfig = read_config(&common.config)?;
    let registry = load_registry(&cfg.registry)?;
    ensure_out(&common.out)?;
    let mut payload = serde_json::Map::new();
    let order = match cfg.strategy {
        Strategy::E2h | Strategy::H2e => {
            let splits = splits_for(&registry, cfg.test_fraction, cfg.min_eval)?;
            let mut probe = ProbeConfig::default();
            if let Some(e) = cfg.probe_epochs {
                probe.epochs = e;
            }
            if let Some(s) = cfg.probe_seed {
                probe.seed = s;
            }
            let scores: Vec<DifficultyScore> = registry
                .records
                .iter()
                .map(|r| curricula::probe_difficulty(r, &splits[&r.id], &probe))
                .collect::<Result<_, _>>()?;
            payload.insert("scores".into(), serde_json::to_value(&scores).unwrap());
            curricula::order_by_difficulty(&scores, cfg.strategy)?
        }
        Strategy::E2e | Strategy::H2h | Strategy::Switch => {
            let start = cfg
                .start
                .as_deref()
                .ok_or_else(|| Error::Config("start dataset required for OT-greedy strategies".into()))?;
            let ot = OtddConfig {
                solver: cfg.solver.unwrap_or(OtSolver::Exact),
                epsilon: cfg.epsilon,
                max_iter: cfg.max_iter.unwrap_or(1000),
                cov_mode: cfg.cov_mode.unwrap_or(CovMode::Diagonal),
                ..OtddConfig::default()
            };
            let refs: Vec<&DatasetRecord> = registry.records.iter().collect();
            let dm = curricula::distance_matrix(&refs, &ot)?;
            let dm_path = common.out.join("distances.json");
            let mut bytes = serde_json::to_vec_pretty(&dm).unwrap();
            bytes.push(b'\n');
            fs::write(&dm_path, bytes).map_err(|e| Error::io(&dm_path, e))?;
            payload.insert("distances".into(), serde_json::to_value(&dm).unwrap());
            curricula::order_by_distance(&dm, cfg.strategy, start)?
        }
        Strategy::DomainBased => {
            let datasets: Vec<(String, String)> = registry
                .records
                .iter()
                .map(|r| (r.id.clone(), r.domain.clone()))
                .collect();
            let order = cfg
                .domain_order
                .clone()
                .unwrap_or_else(|| registry.domains());
            curricula::order_by_domain(&datasets, &order)?
        }
    };
    let order = match &cfg.proxy_mapping {
        Some(map) => curricula::apply_proxy_mapping(&order, map)?,
        None => order,
    };
    let cur_path = common.out.join("curriculum.json");
    let mut bytes = serde_json::to_vec_pretty(&order).unwrap();
    bytes.push(b'\n');
    fs::write(&cur_path, bytes).map_err(|e| Error::io(&cur_path, e))?;
    payload.insert("order".into(), serde_json::to_value(&order).unwrap());
    RunReport::new(
        "curriculum",
        serde_json::to_value(&cfg).unwrap(),
        Value::Object(payload),
    )
    .write(&common.out.join("report.json"))
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabSpec {
    source: String,
    labels: Vec<String>,
    /// Max-cosine similarity per non-exactly-matched label.
    #[serde(default)]
    scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuditConfig {
    reference: VocabSpec,
    datasets: Vec<VocabSpec>,
}

fn cmd_audit(common: &Common) -> Result<(), Error> {
    let cfg: AuditConfig = read_config(&common.config)?;
    let reference = audit::LabelVocab::new(&cfg.reference.source, cfg.reference.labels.clone());
    let vocabs: Vec<(audit::LabelVocab, Vec<f64>)> = cfg
        .datasets
        .iter()
        .map(|v| (audit::LabelVocab::new(&v.source, v.labels.clone()), v.scores.clone()))
        .collect();
    let report = audit::audit_overlap(&reference, &vocabs)?;
    ensure_out(&common.out)?;
    let overlap_path = common.out.join("overlap.json");
    let mut bytes = serde_json::to_vec_pretty(&report).unwrap();
    bytes.push(b'\n');
    fs::write(&overlap_path, bytes).map_err(|e| Error::io(&overlap_path, e))?;
    let mut csv = String::from("source,exact_matches,concept_matches,p90\n");
    for d in &report.per_dataset {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            d.source, d.exact_matches, d.concept_matches, d.p90
        ));
    }
    let csv_path = common.out.join("overlap.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    RunReport::new(
        "audit",
        serde_json::to_value(&cfg).unwrap(),
        serde_json::to_value(&report).unwrap(),
    )
    .write(&common.out.join("report.json"))
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FigureKind {
    RelativeAccuracy,
    Heatmap,
    Trend,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportConfig {
    kind: FigureKind,
    /// Run report paths; relative-accuracy treats the first as baseline.
    runs: Vec<PathBuf>,
}

fn payload_of(path: &Path) -> Result<(String, Value), Error> {
    let report = RunReport::read(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    Ok((name, report.payload))
}

fn cmd_report(common: &Common) -> Result<(), Error> {
    let cfg: ReportConfig = read_config(&common.config)?;
    if cfg.runs.is_empty() {
        return Err(Error::Config("report needs at least one run".into()));
    }
    ensure_out(&common.out)?;
    let mut rows: Vec<PlotRow> = Vec::new();
    match cfg.kind {
        FigureKind::RelativeAccuracy => {
            let mut means = Vec::new();
            for path in &cfg.runs {
                let (name, payload) = payload_of(path)?;
                let mean = payload["aggregate"]["mean"].as_f64().ok_or_else(|| {
                    Error::Invalid(format!("{}: no aggregate mean in payload", path.display()))
                })?;
                means.push((name, mean));
            }
            let baseline = means[0].1;
            for (name, mean) in &means {
                rows.push(PlotRow {
                    figure_kind: "relative_accuracy".into(),
                    x: name.clone(),
                    series: "mean".into(),
                    value: mean - baseline,
                });
            }
        }
        FigureKind::Heatmap => {
            let (_, payload) = payload_of(&cfg.runs[0])?;
            let heat = payload["per_seed"][0]["heatmap"].clone();
            if heat.is_null() {
                return Err(Error::Invalid(
                    "no heatmap in payload: train sequentially with per-stage evaluation".into(),
                ));
            }
            let m: geom_core::metrics::AccuracyMatrix =
                serde_json::from_value(heat).map_err(|e| Error::Invalid(e.to_string()))?;
            for r in 0..m.n_tasks() {
                for c in 0..=r {
                    rows.push(PlotRow {
                        figure_kind: "heatmap".into(),
                        x: format!("stage{r}"),
                        series: format!("task{c}"),
                        value: m.get(r, c).unwrap_or(f64::NAN),
                    });
                }
            }
        }
        FigureKind::Trend => {
            let (_, payload) = payload_of(&cfg.runs[0])?;
            let per_seed = payload["per_seed"]
                .as_array()
                .ok_or_else(|| Error::Invalid("no per-seed data in payload".into()))?;
            let mut any = false;
            for entry in per_seed {
                let seed = entry["seed"].as_u64().unwrap_or(0);
                if let Some(points) = entry["val_history"].as_array() {
                    for p in points {
                        any = true;
                        rows.push(PlotRow {
                            figure_kind: "trend".into(),
                            x: p["step"].to_string(),
                            series: format!("seed{seed}"),
                            value: p["accuracy"].as_f64().unwrap_or(f64::NAN),
                        });
                    }
                }
            }
            if !any {
                return Err(Error::Invalid("no trajectory recorded in this run".into()));
            }
        }
    }
    write_plot_csv(&common.out.join("plot.csv"), &rows)?;
    RunReport::new(
        "report",
        serde_json::to_value(&cfg).unwrap(),
        json!({"rows": rows.len()}),
    )
    .write(&common.out.join("report.json"))
}
