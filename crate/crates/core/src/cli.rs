//! Command-line front end. Every subcommand writes its primary output
//! atomically, a `<output>.run.json` manifest recording flags, seed and
//! input digests, and a `<output>.events.jsonl` event log.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{cluster_dataset, ClusterConfig, CovarianceKind, DacConfig, EmConfig, COHORT_FORMAT};
use crate::dataset::{
    intersect_attributes, load_dataset, make_splits, manifest_embeddings_path, save_dataset, save_manifest,
    EmbeddingDataset, GroupLabels, Split, VisibleCohortPartition,
};
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, DatasetSource, ExperimentConfig};
use crate::io::{read_json, read_to_string, write_atomic, write_json};
use crate::metrics::{evaluate, EvalReport, FAIRNESS_METRICS, HIDDEN_PARTITION};
use crate::numerics::Rng;
use crate::stats::{cd_diagram, friedman, parse_score_tsv_skipping, Direction, ScoreTable};
use crate::synth::{generate, lemma1_check, ClusterRisk, SynthSpec};
use crate::trainer::{
    train, Architecture, Checkpoint, FairnessConfig, Grouping, LossKind, TrainHyper, TrainingConfig,
    DEFAULT_HIDDEN, MODEL_FORMAT,
};

/// Environment variable naming the directory for outputs whose path is not given.
pub const OUT_DIR_ENV: &str = "LHCF_OUT_DIR";
pub const RUN_FORMAT: &str = "lhcf-run/1";

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nformats: lhcf-embeddings/1 lhcf-cohorts/1 lhcf-model/1 lhcf-eval/1 lhcf-run/1"
);

#[derive(Debug, Parser, Serialize)]
#[command(name = "lhcf", version, long_version = LONG_VERSION, about = "Hidden-cohort fairness pipeline over embedding datasets")]
pub struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Suppress progress messages on standard error.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic dataset from a spec file.
    Synth(SynthArgs),
    /// Assign train/val/test splits and write them into the manifest.
    Split(SplitArgs),
    /// Discover hidden cohorts with a BIC-selected Gaussian mixture.
    Cluster(ClusterArgs),
    /// Train a classifier head with an optional fairness loss.
    Train(TrainArgs),
    /// Evaluate a model on one split.
    Eval(EvalArgs),
    /// Friedman/Nemenyi comparison of methods with a CD diagram.
    Compare(CompareArgs),
    /// Check that no union of clusters exceeds the worst cluster risk.
    LemmaCheck(LemmaArgs),
    /// Run a declarative experiment grid.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Embedding TSV to write [default: $LHCF_OUT_DIR/data.tsv].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest to write [default: beside the TSV, `<stem>.manifest.json`].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Train,val,test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub fractions: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the split manifest here instead of updating `--manifest`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 12)]
    pub k_max: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Diagonal instead of full covariances.
    #[arg(long)]
    pub diag_cov: bool,
    /// Z-score embeddings before clustering.
    #[arg(long)]
    pub standardize: bool,
    /// PCA-whiten, keeping this fraction of variance.
    #[arg(long)]
    pub pca: Option<f64>,
    /// Append one-hot attributes (comma-separated) to the embeddings.
    #[arg(long, value_delimiter = ',')]
    pub dac: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    pub dac_weight: f64,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Cohort file to write [default: $LHCF_OUT_DIR/cohorts.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchArg {
    Linear,
    Mlp,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Hidden-cohort file from `cluster`.
    #[arg(long, conflicts_with = "visible")]
    pub groups: Option<PathBuf>,
    /// Visible attributes whose intersection defines the groups.
    #[arg(long, value_delimiter = ',')]
    pub visible: Vec<String>,
    #[arg(long, default_value = "none")]
    pub fair: String,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ArchArg::Linear)]
    pub arch: ArchArg,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// Checkpoint to write [default: $LHCF_OUT_DIR/model.json]. The
    /// per-epoch report goes to `<out>.train.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Hidden-cohort file; adds cohort quality and per-cohort risks.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Visible partition, repeatable; comma-separated attributes intersect.
    /// Defaults to one partition per visible attribute.
    #[arg(long)]
    pub visible: Vec<String>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Method label stored in the report.
    #[arg(long)]
    pub method: Option<String>,
    /// Setting label stored in the report.
    #[arg(long)]
    pub setting: Option<String>,
    /// Report to write [default: $LHCF_OUT_DIR/report.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Results TSV (`setting m1 m2...` or `metric setting m1 m2...`).
    #[arg(long, conflicts_with = "reports", required_unless_present = "reports")]
    pub scores: Option<PathBuf>,
    /// Directory of evaluation reports.
    #[arg(long)]
    pub reports: Option<PathBuf>,
    #[arg(long, default_value = "es_auc")]
    pub metric: String,
    /// `higher` or `lower`; inferred for known metrics.
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Rank result to write [default: $LHCF_OUT_DIR/ranks.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LemmaArgs {
    /// JSON list of `{risk, count}` per cluster.
    #[arg(long, conflicts_with = "from_eval", required_unless_present = "from_eval")]
    pub risks: Option<PathBuf>,
    /// Evaluation report with per-cohort risks.
    #[arg(long)]
    pub from_eval: Option<PathBuf>,
    /// Check result to write [default: $LHCF_OUT_DIR/lemma.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Results directory [default: $LHCF_OUT_DIR/<config name>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub duration_ms: u128,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sidecar(primary: &Path, suffix: &str) -> PathBuf {
    let mut name = primary.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    primary.with_file_name(name)
}

fn default_out(given: &Option<PathBuf>, file: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
            .join(file)
    })
}

/// Progress to standard error and JSON-lines events to a file.
pub struct EventLog {
    start: Instant,
    quiet: bool,
    events: Mutex<Vec<String>>,
}

impl EventLog {
    pub fn new(quiet: bool) -> Self {
        EventLog {
            start: Instant::now(),
            quiet,
            events: Mutex::new(Vec::new()),
        }
    }

    pub fn event(&self, name: &str, fields: serde_json::Value) {
        let mut obj = serde_json::Map::new();
        obj.insert("t_ms".into(), (self.start.elapsed().as_millis() as u64).into());
        obj.insert("event".into(), name.into());
        if let serde_json::Value::Object(m) = fields {
            obj.extend(m);
        }
        let line = serde_json::Value::Object(obj).to_string();
        if let Ok(mut ev) = self.events.lock() {
            ev.push(line);
        }
    }

    pub fn info(&self, message: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("lhcf: {}", message.as_ref());
        }
        self.event("info", serde_json::json!({ "message": message.as_ref() }));
    }

    pub fn warn(&self, message: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("lhcf: warning: {}", message.as_ref());
        }
        self.event("warning", serde_json::json!({ "message": message.as_ref() }));
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        for line in self.events.lock().map(|e| e.clone()).unwrap_or_default() {
            let _ = writeln!(bytes, "{line}");
        }
        write_atomic(path, &bytes)
    }
}

struct Outcome {
    primary: PathBuf,
    outputs: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 on success, 1 for invalid input, 2 for
/// internal failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("lhcf: error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, in which case it is reused.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let log = EventLog::new(cli.quiet);
    let start = Instant::now();
    let (name, outcome) = match &cli.command {
        Command::Synth(a) => ("synth", cmd_synth(a, &log)?),
        Command::Split(a) => ("split", cmd_split(a, &log)?),
        Command::Cluster(a) => ("cluster", cmd_cluster(a, &log)?),
        Command::Train(a) => ("train", cmd_train(a, &log)?),
        Command::Eval(a) => ("eval", cmd_eval(a, &log)?),
        Command::Compare(a) => ("compare", cmd_compare(a, &log)?),
        Command::LemmaCheck(a) => ("lemma-check", cmd_lemma(a, &log)?),
        Command::Experiment(a) => ("experiment", cmd_experiment(a, &log)?),
    };
    let inputs = outcome
        .inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        format: RUN_FORMAT.into(),
        tool: "lhcf".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: name.into(),
        args: serde_json::to_value(cli).unwrap_or(serde_json::Value::Null),
        seed: outcome.seed,
        inputs,
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        duration_ms: start.elapsed().as_millis(),
    };
    log.event("done", serde_json::json!({ "command": name }));
    write_json(&sidecar(&outcome.primary, ".run.json"), &manifest)?;
    log.write(&sidecar(&outcome.primary, ".events.jsonl"))?;
    Ok(())
}

fn manifest_inputs(manifest: &Path) -> Result<Vec<PathBuf>> {
    Ok(vec![manifest.to_path_buf(), manifest_embeddings_path(manifest)?])
}

fn cmd_synth(a: &SynthArgs, log: &EventLog) -> Result<Outcome> {
    let mut spec: SynthSpec = read_json(&a.spec)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out = default_out(&a.out, "data.tsv");
    let manifest = a.manifest.clone().unwrap_or_else(|| {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{stem}.manifest.json"))
    });
    let generated = generate(&spec)?;
    save_dataset(&generated.dataset, &manifest, &out)?;
    log.info(format!(
        "wrote {} records (d = {}, {} cohorts) to {}",
        generated.dataset.len(),
        spec.d,
        spec.k_true,
        out.display()
    ));
    Ok(Outcome {
        primary: out.clone(),
        outputs: vec![out, manifest],
        inputs: vec![a.spec.clone()],
        seed: Some(spec.seed),
    })
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidArgument(format!("--fractions: cannot parse `{s}`")))?;
    if v.len() != 3 {
        return Err(Error::InvalidArgument(format!("--fractions needs 3 values, got {}", v.len())));
    }
    Ok((v[0], v[1], v[2]))
}

fn cmd_split(a: &SplitArgs, log: &EventLog) -> Result<Outcome> {
    let inputs = manifest_inputs(&a.manifest)?;
    let ds = load_dataset(&a.manifest)?;
    let split = make_splits(&ds, parse_fractions(&a.fractions)?, &mut Rng::new(a.seed))?;
    let out = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    let tsv = manifest_embeddings_path(&a.manifest)?;
    save_manifest(&split, &out, &tsv)?;
    let counts: BTreeMap<&str, usize> = Split::ALL.iter().map(|s| (s.as_str(), split.indices(*s).len())).collect();
    log.info(format!("split {} records: {counts:?}", split.len()));
    Ok(Outcome {
        primary: out.clone(),
        outputs: vec![out],
        inputs,
        seed: Some(a.seed),
    })
}

fn load_split_dataset(manifest: &Path) -> Result<EmbeddingDataset> {
    let ds = load_dataset(manifest)?;
    if !ds.has_splits() {
        return Err(Error::InvalidArgument(format!(
            "{} has no split assignment; run `lhcf split --manifest {}` first",
            manifest.display(),
            manifest.display()
        )));
    }
    Ok(ds)
}

fn cmd_cluster(a: &ClusterArgs, log: &EventLog) -> Result<Outcome> {
    let inputs = manifest_inputs(&a.manifest)?;
    let ds = load_split_dataset(&a.manifest)?;
    let cfg = ClusterConfig {
        k_min: a.k_min,
        k_max: a.k_max,
        restarts: a.restarts,
        seed: a.seed,
        em: EmConfig {
            max_iter: a.max_iter,
            tol: a.tol,
            covariance: if a.diag_cov {
                CovarianceKind::Diagonal
            } else {
                CovarianceKind::Full
            },
        },
        standardize: a.standardize,
        pca: a.pca,
        dac: if a.dac.is_empty() {
            None
        } else {
            Some(DacConfig {
                attributes: a.dac.clone(),
                weight: a.dac_weight,
            })
        },
    };
    if cfg.k_min == 0 || cfg.k_min > cfg.k_max {
        return Err(Error::InvalidArgument(format!(
            "--k-min {} / --k-max {}: need 1 <= k-min <= k-max",
            cfg.k_min, cfg.k_max
        )));
    }
    if cfg.restarts == 0 {
        return Err(Error::InvalidArgument("--restarts must be at least 1".into()));
    }
    let (cohorts, sweep) = cluster_dataset(&ds, &cfg)?;
    for (k, e) in &sweep.failures {
        log.warn(format!("K = {k} failed: {e}"));
    }
    for c in &sweep.candidates {
        log.event(
            "bic",
            serde_json::json!({"k": c.k, "bic": c.bic, "restart": c.restart, "log_likelihood": c.model.log_likelihood}),
        );
    }
    log.info(format!(
        "selected K* = {} (cohort sizes {:?})",
        cohorts.k_star,
        cohorts.cohort_sizes()
    ));
    debug_assert_eq!(cohorts.format, COHORT_FORMAT);
    let out = default_out(&a.out, "cohorts.json");
    write_json(&out, &cohorts)?;
    Ok(Outcome {
        primary: out.clone(),
        outputs: vec![out],
        inputs,
        seed: Some(a.seed),
    })
}

fn load_cohort_groups(path: &Path, ds: &EmbeddingDataset) -> Result<GroupLabels> {
    let cohorts: crate::clustering::CohortFile = read_json(path)?;
    let groups = GroupLabels::from(&cohorts);
    if let Some(id) = groups.first_missing(ds) {
        return Err(Error::UnknownRecord(format!(
            "{id} (present in the manifest, missing from {})",
            path.display()
        )));
    }
    Ok(groups)
}

fn cmd_train(a: &TrainArgs, log: &EventLog) -> Result<Outcome> {
    let mut inputs = manifest_inputs(&a.manifest)?;
    let ds = load_split_dataset(&a.manifest)?;
    let loss_kind: LossKind = a.fair.parse()?;
    let (groups, grouping) = if let Some(g) = &a.groups {
        inputs.push(g.clone());
        (Some(load_cohort_groups(g, &ds)?), Grouping::HiddenCohorts)
    } else if !a.visible.is_empty() {
        let p = intersect_attributes(&ds, &a.visible)?;
        let name = p.name.clone();
        let labels = GroupLabels::from(&p);
        if let Some(id) = labels.first_missing(&ds) {
            return Err(Error::MissingAttribute {
                record: id.to_string(),
                attribute: a.visible.join(","),
            });
        }
        (Some(labels), Grouping::VisiblePartition(name))
    } else {
        (None, Grouping::None)
    };
    let cfg = FairnessConfig {
        loss_kind,
        lambda: a.lambda,
        grouping,
    };
    let hyper = TrainHyper {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        patience: a.patience,
        momentum: a.momentum,
        seed: a.seed,
    };
    let arch = match a.arch {
        ArchArg::Linear => Architecture::Linear,
        ArchArg::Mlp => Architecture::Mlp { hidden: a.hidden },
    };
    let (model, report) = train(&ds, groups.as_ref(), &cfg, &hyper, arch)?;
    for e in &report.epochs {
        log.event("epoch", serde_json::to_value(e).unwrap_or_default());
    }
    log.info(format!(
        "best epoch {} of {} (validation AUC {:.4}{})",
        report.best_epoch,
        report.epochs.len(),
        report.best_val_auc,
        if report.stopped_early { ", stopped early" } else { "" }
    ));
    let ck = Checkpoint::from_model(
        &model,
        TrainingConfig {
            fairness: cfg,
            hyper,
        },
        report.best_epoch,
    );
    debug_assert_eq!(ck.format, MODEL_FORMAT);
    let out = default_out(&a.out, "model.json");
    let report_path = sidecar(&out, ".train.json");
    write_json(&out, &ck)?;
    write_json(&report_path, &report)?;
    Ok(Outcome {
        primary: out.clone(),
        outputs: vec![out, report_path],
        inputs,
        seed: Some(a.seed),
    })
}

fn cmd_eval(a: &EvalArgs, log: &EventLog) -> Result<Outcome> {
    let mut inputs = manifest_inputs(&a.manifest)?;
    inputs.push(a.model.clone());
    let ds = load_split_dataset(&a.manifest)?;
    let split: Split = a.split.parse()?;
    let ck: Checkpoint = read_json(&a.model)?;
    let model = ck.to_model()?;
    let cohorts = match &a.groups {
        Some(g) => {
            inputs.push(g.clone());
            Some(load_cohort_groups(g, &ds)?)
        }
        None => None,
    };
    let partitions: Vec<VisibleCohortPartition> = if a.visible.is_empty() {
        ds.visible_attributes()
            .iter()
            .map(|s| intersect_attributes(&ds, &[s.name.as_str()]))
            .collect::<Result<_>>()?
    } else {
        a.visible
            .iter()
            .map(|v| intersect_attributes(&ds, &v.split(',').map(str::trim).collect::<Vec<_>>()))
            .collect::<Result<_>>()?
    };
    let mut report = evaluate(&ds, &model, cohorts.as_ref(), &partitions, split)?;
    if let Some(m) = &a.method {
        report.meta.insert("method".into(), m.clone());
    }
    if let Some(s) = &a.setting {
        report.meta.insert("setting".into(), s.clone());
    }
    for e in &report.exclusions {
        log.warn(format!("{}: group {} excluded ({})", e.partition, e.group, e.reason));
    }
    log.info(format!(
        "{} split: AUC {:.4}, Brier {:.4}",
        report.split, report.overall.auc, report.overall.brier
    ));
    let out = default_out(&a.out, "report.json");
    write_json(&out, &report)?;
    Ok(Outcome {
        primary: out.clone(),
        outputs: vec![out],
        inputs,
        seed: Some(ck.seed),
    })
}

fn metric_direction(metric: &str, given: &Option<String>) -> Result<Direction> {
    if let Some(d) = given {
        return d.parse();
    }
    FAIRNESS_METRICS
        .iter()
        .find(|(m, _)| *m == metric)
        .map(|(_, higher)| if *higher { Direction::Higher } else { Direction::Lower })
        .ok_or_else(|| {
            Error::InvalidArgument(format!("--direction is required for metric `{metric}`"))
        })
}

/// Score table from evaluation reports: columns are the reports' `method`
/// labels, rows are `<setting or seed>/<partition>`.
pub fn table_from_reports(
    reports: &[(String, EvalReport)],
    metric: &str,
    direction: Direction,
) -> Result<ScoreTable> {
    let mut methods: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (stem, r) in reports {
        let method = r.meta.get("method").cloned().unwrap_or_else(|| stem.clone());
        let setting = r
            .meta
            .get("setting")
            .or_else(|| r.meta.get("seed"))
            .cloned()
            .unwrap_or_else(|| "default".into());
        if !methods.contains(&method) {
            methods.push(method.clone());
        }
        for (partition, f) in &r.fairness {
            if partition == HIDDEN_PARTITION {
                continue;
            }
            if let Some(tp) = r.meta.get("train_partition") {
                if tp != partition {
                    continue;
                }
            }
            let v = f
                .metric(metric)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown metric `{metric}`")))?;
            cells
                .entry(format!("{setting}/{partition}"))
                .or_default()
                .insert(method.clone(), v);
        }
    }
    let mut settings = Vec::new();
    let mut scores = Vec::new();
    for (s, row) in cells {
        if let Some(v) = methods.iter().map(|m| row.get(m).copied()).collect::<Option<Vec<f64>>>() {
            settings.push(s);
            scores.push(v);
        }
    }
    ScoreTable::new(methods, settings, scores, direction)
}

fn cmd_compare(a: &CompareArgs, log: &EventLog) -> Result<Outcome> {
    let direction = metric_direction(&a.metric, &a.direction)?;
    let mut inputs = Vec::new();
    let table = if let Some(p) = &a.scores {
        inputs.push(p.clone());
        let (table, skipped) = parse_score_tsv_skipping(&read_to_string(p)?, Some(&a.metric), direction)?;
        if !skipped.is_empty() {
            log.warn(format!("settings with missing scores excluded: {}", skipped.join(", ")));
        }
        table
    } else {
        let dir = a.reports.as_ref().expect("clap enforces one of --scores/--reports");
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".run.json"))
            .collect();
        paths.sort();
        let mut reports = Vec::new();
        for p in paths {
            let r: EvalReport = read_json(&p)?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            inputs.push(p);
            reports.push((stem, r));
        }
        table_from_reports(&reports, &a.metric, direction)?
    };
    let ranks = friedman(&table, a.alpha)?;
    log.info(format!(
        "Friedman chi2 = {:.4} (critical {:.4}, {}), CD = {}",
        ranks.friedman_statistic,
        ranks.critical_value,
        if ranks.significant { "significant" } else { "not significant" },
        ranks.cd.map(|c| format!("{c:.4}")).unwrap_or_else(|| "n/a".into())
    ));
    let out = default_out(&a.out, "ranks.json");
    write_json(&out, &ranks)?;
    let mut outputs = vec![out.clone()];
    if let Some(svg) = &a.svg {
        write_atomic(svg, cd_diagram(&ranks).as_bytes())?;
        outputs.push(svg.clone());
    }
    Ok(Outcome {
        primary: out,
        outputs,
        inputs,
        seed: None,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RiskInput {
    List(Vec<ClusterRisk>),
    Columns { risks: Vec<f64>, counts: Vec<usize> },
}

fn cmd_lemma(a: &LemmaArgs, log: &EventLog) -> Result<Outcome> {
    let (input, clusters) = if let Some(p) = &a.risks {
        let clusters = match read_json::<RiskInput>(p)? {
            RiskInput::List(v) => v,
            RiskInput::Columns { risks, counts } => {
                if risks.len() != counts.len() {
                    return Err(Error::DimensionMismatch {
                        expected: risks.len(),
                        got: counts.len(),
                        context: Some(format!("{}: risks vs counts", p.display())),
                    });
                }
                risks
                    .into_iter()
                    .zip(counts)
                    .map(|(risk, count)| ClusterRisk { risk, count })
                    .collect()
            }
        };
        (p.clone(), clusters)
    } else {
        let p = a.from_eval.clone().expect("clap enforces one of --risks/--from-eval");
        let r: EvalReport = read_json(&p)?;
        let risks = r.cohort_risks.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{} has no per-cohort risks; evaluate with --groups",
                p.display()
            ))
        })?;
        (
            p,
            risks
                .into_iter()
                .map(|c| ClusterRisk {
                    risk: c.risk,
                    count: c.count,
                })
                .collect(),
        )
    };
    let result = lemma1_check(&clusters)?;
    log.info(format!(
        "K = {}: {} subsets, max violation {:e}, {}",
        result.k,
        result.union_risks.len(),
        result.max_violation,
        if result.holds { "holds" } else { "VIOLATED" }
    ));
    let out = default_out(&a.out, "lemma.json");
    write_json(&out, &result)?;
    if !result.holds {
        return Err(Error::LemmaViolated(result.max_violation));
    }
    Ok(Outcome {
        primary: out.clone(),
        outputs: vec![out],
        inputs: vec![input],
        seed: None,
    })
}

fn cmd_experiment(a: &ExperimentArgs, log: &EventLog) -> Result<Outcome> {
    let mut cfg: ExperimentConfig = read_json(&a.config)?;
    let mut inputs = vec![a.config.clone()];
    if let DatasetSource::Manifest(m) = &cfg.dataset {
        let p = Path::new(m);
        let resolved = if p.is_relative() {
            a.config.parent().unwrap_or(Path::new(".")).join(p)
        } else {
            p.to_path_buf()
        };
        inputs.extend(manifest_inputs(&resolved)?);
        cfg.dataset = DatasetSource::Manifest(resolved.display().to_string());
    }
    let out = default_out(&a.out, &cfg.name);
    log.info(format!(
        "experiment `{}`: {} seeds x {} methods",
        cfg.name,
        cfg.seeds.len(),
        cfg.method_labels().len()
    ));
    let observer = |name: &str, v: serde_json::Value| log.event(name, v);
    let results = run_experiment(&cfg, &observer)?;
    for w in &results.warnings {
        log.warn(w);
    }
    let outputs = results.write(&out, &observer)?;
    log.info(format!("wrote {} files under {}", outputs.len(), out.display()));
    Ok(Outcome {
        primary: out.join("results"),
        outputs,
        inputs,
        seed: None,
    })
}
