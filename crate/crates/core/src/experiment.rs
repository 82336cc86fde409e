//! Seeded grid runner comparing fairness training variants across visible
//! partitions of increasing complexity.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_dataset, ClusterConfig, CohortFile, DacConfig};
use crate::dataset::{intersect_attributes, make_splits, EmbeddingDataset, GroupLabels, Split, VisibleCohortPartition};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json};
use crate::metrics::{evaluate, EvalReport, FAIRNESS_METRICS};
use crate::numerics::Rng;
use crate::stats::{cd_diagram, friedman, Direction, ScoreTable};
use crate::synth::{generate, SynthSpec};
use crate::trainer::{train, Architecture, FairnessConfig, Grouping, LossKind, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Erm,
    ClassicWorst,
    ClassicGap,
    LhcfWorst,
    LhcfGap,
    DacWorst,
    DacGap,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Erm,
        Method::ClassicWorst,
        Method::ClassicGap,
        Method::LhcfWorst,
        Method::LhcfGap,
        Method::DacWorst,
        Method::DacGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::ClassicWorst => "Classic-worst",
            Method::ClassicGap => "Classic-gap",
            Method::LhcfWorst => "LHCF-worst",
            Method::LhcfGap => "LHCF-gap",
            Method::DacWorst => "DAC-worst",
            Method::DacGap => "DAC-gap",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Method::Erm => LossKind::None,
            Method::ClassicWorst | Method::LhcfWorst | Method::DacWorst => LossKind::Worst,
            Method::ClassicGap | Method::LhcfGap | Method::DacGap => LossKind::Gap,
        }
    }

    pub fn is_classic(self) -> bool {
        matches!(self, Method::ClassicWorst | Method::ClassicGap)
    }

    pub fn uses_lhcf(self) -> bool {
        matches!(self, Method::LhcfWorst | Method::LhcfGap)
    }

    pub fn uses_dac(self) -> bool {
        matches!(self, Method::DacWorst | Method::DacGap)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synth(SynthSpec),
    /// Path to a dataset manifest, relative to the working directory.
    Manifest(String),
}

fn default_name() -> String {
    "experiment".into()
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}
fn default_dac_weight() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.05
}
fn default_eval_split() -> Split {
    Split::Test
}
fn default_split_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSource,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Visible partitions, each a list of attributes to intersect.
    pub partitions: Vec<Vec<String>>,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default = "default_dac_weight")]
    pub dac_weight: f64,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "default_eval_split")]
    pub eval_split: Split,
    /// Used when a manifest dataset has no split assignment.
    #[serde(default = "default_split_fractions")]
    pub split_fractions: [f64; 3],
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.seeds.is_empty() {
            return bad("experiment needs at least one seed");
        }
        if self.methods.is_empty() {
            return bad("experiment needs at least one method");
        }
        if self.partitions.is_empty() || self.partitions.iter().any(|p| p.is_empty()) {
            return bad("experiment needs at least one non-empty visible partition");
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return bad("lambdas must be a non-empty list of finite values >= 0");
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.methods.iter().all(|m| seen.insert(*m)) {
            return bad("methods must not repeat");
        }
        Ok(())
    }

    /// Column labels: one per method, or one per method and λ when several
    /// λ values are configured (ERM appears once).
    pub fn method_labels(&self) -> Vec<(Method, Option<f64>, String)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            if m == Method::Erm {
                out.push((m, None, m.name().to_string()));
            } else if self.lambdas.len() == 1 {
                out.push((m, Some(self.lambdas[0]), m.name().to_string()));
            } else {
                for &l in &self.lambdas {
                    out.push((m, Some(l), format!("{}@{l}", m.name())));
                }
            }
        }
        out
    }
}

/// The default synthetic benchmark over `seeds`: ERM against classic,
/// hidden-cohort and demographic-aware fairness training on the gender, age
/// and gender×age partitions.
pub fn benchmark_config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        name: "synthetic-benchmark".into(),
        dataset: DatasetSource::Synth(SynthSpec::benchmark(0)),
        seeds,
        methods: vec![
            Method::Erm,
            Method::ClassicWorst,
            Method::ClassicGap,
            Method::LhcfWorst,
            Method::LhcfGap,
            Method::DacWorst,
        ],
        lambdas: default_lambdas(),
        partitions: vec![
            vec!["gender".into()],
            vec!["age".into()],
            vec!["gender".into(), "age".into()],
        ],
        cluster: ClusterConfig {
            k_max: 10,
            restarts: 3,
            ..ClusterConfig::default()
        },
        dac_weight: default_dac_weight(),
        train: TrainHyper::default(),
        architecture: Architecture::Linear,
        eval_split: Split::Test,
        split_fractions: default_split_fractions(),
        alpha: default_alpha(),
    }
}

/// Seeds used by one grid row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub seed: u64,
    pub data: u64,
    pub cluster: u64,
    pub train: u64,
}

impl SeedPlan {
    pub fn new(seed: u64) -> Self {
        SeedPlan {
            seed,
            data: Rng::derive(seed, &[0]).next_u64(),
            cluster: Rng::derive(seed, &[1]).next_u64(),
            train: Rng::derive(seed, &[2]).next_u64(),
        }
    }
}

/// Everything a seed's cells share.
#[derive(Debug, Clone)]
pub struct PreparedSeed {
    pub plan: SeedPlan,
    pub dataset: EmbeddingDataset,
    pub partitions: Vec<VisibleCohortPartition>,
    pub lhcf: Option<CohortFile>,
    pub dac: Option<CohortFile>,
}

pub fn load_seed_dataset(cfg: &ExperimentConfig, plan: &SeedPlan) -> Result<EmbeddingDataset> {
    let ds = match &cfg.dataset {
        DatasetSource::Synth(spec) => {
            let mut spec = spec.clone();
            spec.seed = Rng::derive(spec.seed, &[plan.data]).next_u64();
            if spec.splits.is_none() {
                spec.splits = Some(cfg.split_fractions);
            }
            generate(&spec)?.dataset
        }
        DatasetSource::Manifest(path) => crate::dataset::load_dataset(Path::new(path))?,
    };
    if ds.has_splits() {
        Ok(ds)
    } else {
        let f = cfg.split_fractions;
        make_splits(&ds, (f[0], f[1], f[2]), &mut Rng::new(plan.data))
    }
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedSeed> {
    let plan = SeedPlan::new(seed);
    let dataset = load_seed_dataset(cfg, &plan)?;
    let partitions = cfg
        .partitions
        .iter()
        .map(|p| intersect_attributes(&dataset, p))
        .collect::<Result<Vec<_>>>()?;
    let mut ccfg = cfg.cluster.clone();
    ccfg.seed = plan.cluster;
    ccfg.dac = None;
    let lhcf = if cfg.methods.iter().any(|m| m.uses_lhcf()) {
        Some(cluster_dataset(&dataset, &ccfg)?.0)
    } else {
        None
    };
    let dac = if cfg.methods.iter().any(|m| m.uses_dac()) {
        let mut attrs: Vec<String> = Vec::new();
        for p in &cfg.partitions {
            for a in p {
                if !attrs.contains(a) {
                    attrs.push(a.clone());
                }
            }
        }
        ccfg.dac = Some(DacConfig {
            attributes: attrs,
            weight: cfg.dac_weight,
        });
        Some(cluster_dataset(&dataset, &ccfg)?.0)
    } else {
        None
    };
    Ok(PreparedSeed {
        plan,
        dataset,
        partitions,
        lhcf,
        dac,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub method: Method,
    pub lambda: Option<f64>,
    pub label: String,
    /// Training partition for classic methods.
    pub partition: Option<String>,
}

impl Cell {
    pub fn file_stem(&self) -> String {
        let mut s = format!("seed{}__{}", self.seed, self.label);
        if let Some(p) = &self.partition {
            s.push_str("__");
            s.push_str(p);
        }
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

pub fn run_cell(cfg: &ExperimentConfig, prep: &PreparedSeed, cell: &Cell) -> Result<EvalReport> {
    let ds = &prep.dataset;
    let (groups, grouping): (Option<GroupLabels>, Grouping) = if cell.method.is_classic() {
        let name = cell.partition.as_deref().unwrap_or_default();
        let p = prep
            .partitions
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown partition `{name}`")))?;
        (Some(GroupLabels::from(p)), Grouping::VisiblePartition(p.name.clone()))
    } else if cell.method.uses_lhcf() {
        (prep.lhcf.as_ref().map(GroupLabels::from), Grouping::HiddenCohorts)
    } else if cell.method.uses_dac() {
        (prep.dac.as_ref().map(GroupLabels::from), Grouping::HiddenCohorts)
    } else {
        (None, Grouping::None)
    };
    let fairness = FairnessConfig {
        loss_kind: cell.method.loss_kind(),
        lambda: cell.lambda.unwrap_or(0.0),
        grouping,
    };
    let mut hyper = cfg.train.clone();
    hyper.seed = prep.plan.train;
    let (model, _) = train(ds, groups.as_ref(), &fairness, &hyper, cfg.architecture)?;
    let cohort_groups = if cell.method.uses_lhcf() || cell.method.uses_dac() {
        groups.as_ref()
    } else {
        None
    };
    let mut report = evaluate(ds, &model, cohort_groups, &prep.partitions, cfg.eval_split)?;
    report.meta.insert("method".into(), cell.label.clone());
    report.meta.insert("seed".into(), cell.seed.to_string());
    if let Some(l) = cell.lambda {
        report.meta.insert("lambda".into(), l.to_string());
    }
    if let Some(p) = &cell.partition {
        report.meta.insert("train_partition".into(), p.clone());
    }
    Ok(report)
}

pub fn partition_names(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.partitions.iter().map(|p| crate::dataset::partition_name(p)).collect()
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let pnames = partition_names(cfg);
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for (method, lambda, label) in cfg.method_labels() {
            if method.is_classic() {
                for p in &pnames {
                    out.push(Cell {
                        seed,
                        method,
                        lambda,
                        label: label.clone(),
                        partition: Some(p.clone()),
                    });
                }
            } else {
                out.push(Cell {
                    seed,
                    method,
                    lambda,
                    label: label.clone(),
                    partition: None,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub warnings: Vec<String>,
}

/// Progress callback: event name and payload.
pub type Observer<'a> = &'a (dyn Fn(&str, serde_json::Value) + Sync);

/// Runs the whole grid. Seeds are prepared in parallel, then cells. Results
/// come back in grid order regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, observer: Observer<'_>) -> Result<ExperimentResults> {
    cfg.validate()?;
    let prepared: Vec<(u64, std::result::Result<PreparedSeed, String>)> = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            let r = prepare_seed(cfg, s).map_err(|e| e.to_string());
            observer(
                "seed_prepared",
                serde_json::json!({
                    "seed": s,
                    "ok": r.is_ok(),
                    "lhcf_k": r.as_ref().ok().and_then(|p| p.lhcf.as_ref().map(|c| c.k_star)),
                    "dac_k": r.as_ref().ok().and_then(|p| p.dac.as_ref().map(|c| c.k_star)),
                }),
            );
            (s, r)
        })
        .collect();
    let by_seed: BTreeMap<u64, &std::result::Result<PreparedSeed, String>> =
        prepared.iter().map(|(s, r)| (*s, r)).collect();

    let grid = cells(cfg);
    let results: Vec<CellResult> = grid
        .into_par_iter()
        .map(|cell| {
            let outcome = match by_seed[&cell.seed] {
                Ok(prep) => run_cell(cfg, prep, &cell).map_err(|e| e.to_string()),
                Err(e) => Err(format!("seed preparation failed: {e}")),
            };
            observer(
                "cell_done",
                serde_json::json!({
                    "seed": cell.seed,
                    "method": cell.label,
                    "partition": cell.partition,
                    "ok": outcome.is_ok(),
                }),
            );
            match outcome {
                Ok(report) => CellResult {
                    cell,
                    report: Some(report),
                    error: None,
                },
                Err(e) => CellResult {
                    cell,
                    report: None,
                    error: Some(e),
                },
            }
        })
        .collect();

    let warnings = results
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| {
                format!(
                    "cell seed={} method={}{} failed and is excluded: {e}",
                    r.cell.seed,
                    r.cell.label,
                    r.cell.partition.as_ref().map(|p| format!(" partition={p}")).unwrap_or_default()
                )
            })
        })
        .collect();
    Ok(ExperimentResults {
        config: cfg.clone(),
        cells: results,
        warnings,
    })
}

/// One row of the consolidated table: a metric under one (seed, partition).
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub metric: String,
    pub setting: String,
    pub seed: u64,
    pub partition: String,
    pub values: Vec<Option<f64>>,
}

impl ExperimentResults {
    pub fn labels(&self) -> Vec<String> {
        self.config.method_labels().into_iter().map(|(_, _, l)| l).collect()
    }

    /// Report used for `label` when scoring `partition` under `seed`.
    pub fn report_for(&self, seed: u64, label: &str, partition: &str) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| {
                c.cell.seed == seed
                    && c.cell.label == label
                    && c.cell.partition.as_deref().is_none_or(|p| p == partition)
            })
            .and_then(|c| c.report.as_ref())
    }

    pub fn value(&self, seed: u64, label: &str, partition: &str, metric: &str) -> Option<f64> {
        self.report_for(seed, label, partition)
            .and_then(|r| r.fairness.get(partition))
            .and_then(|f| f.metric(metric))
    }

    pub fn rows(&self) -> Vec<TableRow> {
        let labels = self.labels();
        let mut out = Vec::new();
        for (metric, _) in FAIRNESS_METRICS {
            for &seed in &self.config.seeds {
                for p in partition_names(&self.config) {
                    out.push(TableRow {
                        metric: metric.to_string(),
                        setting: format!("seed{seed}/{p}"),
                        seed,
                        values: labels.iter().map(|l| self.value(seed, l, &p, metric)).collect(),
                        partition: p,
                    });
                }
            }
        }
        out
    }

    /// Tab-separated table with columns `metric setting <methods...>`.
    /// Missing cells are written as `NA`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tsetting");
        for l in self.labels() {
            s.push('\t');
            s.push_str(&l);
        }
        s.push('\n');
        for row in self.rows() {
            s.push_str(&row.metric);
            s.push('\t');
            s.push_str(&row.setting);
            for v in &row.values {
                s.push('\t');
                match v {
                    Some(x) => s.push_str(&format!("{x}")),
                    None => s.push_str("NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Complete rows for `metric` as a score table.
    pub fn score_table(&self, metric: &str) -> Result<ScoreTable> {
        let direction = FAIRNESS_METRICS
            .iter()
            .find(|(m, _)| *m == metric)
            .map(|(_, higher)| if *higher { Direction::Higher } else { Direction::Lower })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric `{metric}`")))?;
        let mut settings = Vec::new();
        let mut scores = Vec::new();
        for row in self.rows().into_iter().filter(|r| r.metric == metric) {
            if let Some(v) = row.values.iter().copied().collect::<Option<Vec<f64>>>() {
                settings.push(row.setting);
                scores.push(v);
            }
        }
        ScoreTable::new(self.labels(), settings, scores, direction)
    }

    /// Mean of `metric` over partitions for each seed with complete data.
    pub fn per_seed_mean(&self, label: &str, metric: &str) -> BTreeMap<u64, f64> {
        let parts = partition_names(&self.config);
        let mut out = BTreeMap::new();
        for &seed in &self.config.seeds {
            let vals: Option<Vec<f64>> = parts.iter().map(|p| self.value(seed, label, p, metric)).collect();
            if let Some(v) = vals {
                out.insert(seed, v.iter().sum::<f64>() / v.len() as f64);
            }
        }
        out
    }

    pub fn summary(&self) -> ExperimentSummary {
        let mut methods = BTreeMap::new();
        for label in self.labels() {
            let mut metrics = BTreeMap::new();
            for (metric, _) in FAIRNESS_METRICS {
                let per_seed = self.per_seed_mean(&label, metric);
                if !per_seed.is_empty() {
                    let mean = per_seed.values().sum::<f64>() / per_seed.len() as f64;
                    metrics.insert(metric.to_string(), MetricSummary { mean, per_seed });
                }
            }
            methods.insert(label, metrics);
        }
        ExperimentSummary {
            name: self.config.name.clone(),
            methods,
            warnings: self.warnings.clone(),
        }
    }

    /// Writes reports, the consolidated table, per-metric rank results and
    /// CD diagrams under `dir`. Returns the paths written.
    pub fn write(&self, dir: &Path, observer: Observer<'_>) -> Result<Vec<std::path::PathBuf>> {
        let mut written = Vec::new();
        for c in &self.cells {
            if let Some(r) = &c.report {
                let p = dir.join("reports").join(format!("{}.json", c.cell.file_stem()));
                write_json(&p, r)?;
                written.push(p);
            }
        }
        let failures: Vec<&CellResult> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        let p = dir.join("failures.json");
        write_json(&p, &failures)?;
        written.push(p);
        let p = dir.join("results.tsv");
        write_atomic(&p, self.to_tsv().as_bytes())?;
        written.push(p);
        for (metric, _) in FAIRNESS_METRICS {
            let ranked = self.score_table(metric).and_then(|t| friedman(&t, self.config.alpha));
            match ranked {
                Ok(r) => {
                    let p = dir.join(format!("ranks_{metric}.json"));
                    write_json(&p, &r)?;
                    written.push(p);
                    let p = dir.join(format!("cd_{metric}.svg"));
                    write_atomic(&p, cd_diagram(&r).as_bytes())?;
                    written.push(p);
                }
                Err(e) => observer(
                    "warning",
                    serde_json::json!({"metric": metric, "message": format!("no rank comparison: {e}")}),
                ),
            }
        }
        let p = dir.join("summary.json");
        write_json(&p, &self.summary())?;
        written.push(p);
        Ok(written)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub per_seed: BTreeMap<u64, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub methods: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    pub warnings: Vec<String>,
}
