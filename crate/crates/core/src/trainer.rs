//! Classifier heads over frozen embeddings trained on
//! `mean BCE + λ · fairness loss`, where the fairness loss is the worst group
//! risk or the worst-minus-best gap. Groups may be hidden cohorts or a visible
//! partition; the trainer only sees [`GroupLabels`].

use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, GroupLabels, Split};
use crate::error::{Error, Result};
use crate::metrics;
use crate::numerics::{dot, sigmoid, Matrix, Rng};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Linear,
    Mlp { hidden: usize },
}

/// Trainable head. Parameters are stored flat:
/// linear `[w; b]`, MLP `[W1 (H×d, row-major); b1; w2; b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub architecture: Architecture,
    pub d_in: usize,
    pub params: Vec<f64>,
}

impl ClassifierModel {
    pub fn num_params(architecture: Architecture, d_in: usize) -> usize {
        match architecture {
            Architecture::Linear => d_in + 1,
            Architecture::Mlp { hidden } => hidden * d_in + 2 * hidden + 1,
        }
    }

    pub fn zeros(architecture: Architecture, d_in: usize) -> Self {
        ClassifierModel {
            architecture,
            d_in,
            params: vec![0.0; Self::num_params(architecture, d_in)],
        }
    }

    /// Linear heads start at zero; MLP weights are Glorot-uniform.
    pub fn init(architecture: Architecture, d_in: usize, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(architecture, d_in);
        if let Architecture::Mlp { hidden } = architecture {
            let a1 = (6.0 / (d_in + hidden) as f64).sqrt();
            for w in &mut m.params[..hidden * d_in] {
                *w = (2.0 * rng.uniform() - 1.0) * a1;
            }
            let a2 = (6.0 / (hidden + 1) as f64).sqrt();
            let off = hidden * d_in + hidden;
            for w in &mut m.params[off..off + hidden] {
                *w = (2.0 * rng.uniform() - 1.0) * a2;
            }
        }
        m
    }

    pub fn logit(&self, z: &[f64]) -> f64 {
        let d = self.d_in;
        match self.architecture {
            Architecture::Linear => dot(&self.params[..d], z) + self.params[d],
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut out = b2[0];
                for h in 0..hidden {
                    let a = dot(&w1[h * d..(h + 1) * d], z) + b1[h];
                    out += w2[h] * a.tanh();
                }
                out
            }
        }
    }

    pub fn predict_one(&self, z: &[f64]) -> f64 {
        sigmoid(self.logit(z))
    }

    /// Adds `scale · ∂logit/∂θ` at `z` into `grad`.
    fn accumulate_logit_grad(&self, z: &[f64], scale: f64, grad: &mut [f64]) {
        let d = self.d_in;
        match self.architecture {
            Architecture::Linear => {
                for (g, x) in grad[..d].iter_mut().zip(z) {
                    *g += scale * x;
                }
                grad[d] += scale;
            }
            Architecture::Mlp { hidden } => {
                let w1 = &self.params[..hidden * d];
                let b1 = &self.params[hidden * d..hidden * d + hidden];
                let w2 = &self.params[hidden * d + hidden..hidden * d + 2 * hidden];
                let (gw1, rest) = grad.split_at_mut(hidden * d);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(hidden);
                for h in 0..hidden {
                    let act = (dot(&w1[h * d..(h + 1) * d], z) + b1[h]).tanh();
                    gw2[h] += scale * act;
                    let back = scale * w2[h] * (1.0 - act * act);
                    gb1[h] += back;
                    for (g, x) in gw1[h * d..(h + 1) * d].iter_mut().zip(z) {
                        *g += back * x;
                    }
                }
                gb2[0] += scale;
            }
        }
    }
}

pub fn predict(model: &ClassifierModel, z: &Matrix) -> Result<Vec<f64>> {
    if z.cols() != model.d_in {
        return Err(Error::DimensionMismatch {
            expected: model.d_in,
            got: z.cols(),
            context: Some("model input width".into()),
        });
    }
    Ok(z.iter_rows().map(|r| model.predict_one(r)).collect())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 − 1e-7]`.
pub fn clss_loss(y: u8, p: f64) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Loss and its derivative with respect to the logit (zero inside the clamp).
fn loss_and_dlogit(y: u8, logit: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let loss = clss_loss(y, p);
    let slope = if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p - f64::from(y)
    };
    (loss, slope)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    None,
    Worst,
    Gap,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LossKind::None),
            "worst" => Ok(LossKind::Worst),
            "gap" => Ok(LossKind::Gap),
            other => Err(Error::InvalidArgument(format!(
                "fairness loss `{other}` (expected none|worst|gap)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "kebab-case")]
pub enum Grouping {
    HiddenCohorts,
    VisiblePartition(String),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessConfig {
    pub loss_kind: LossKind,
    pub lambda: f64,
    pub grouping: Grouping,
}

impl FairnessConfig {
    pub fn erm() -> Self {
        FairnessConfig {
            loss_kind: LossKind::None,
            lambda: 0.0,
            grouping: Grouping::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Whether the fairness term contributes at all.
    pub fn active(&self) -> bool {
        self.loss_kind != LossKind::None && self.lambda > 0.0
    }
}

/// Embeddings, labels and group indices for a fixed sample set.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub z: Matrix,
    pub y: Vec<u8>,
    pub groups: Vec<usize>,
    pub num_groups: usize,
}

impl TrainData {
    pub fn new(z: Matrix, y: Vec<u8>, groups: Vec<usize>, num_groups: usize) -> Result<Self> {
        if y.len() != z.rows() || groups.len() != z.rows() {
            return Err(Error::DimensionMismatch {
                expected: z.rows(),
                got: y.len().min(groups.len()),
                context: Some("labels/groups vs embeddings".into()),
            });
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= num_groups) {
            return Err(Error::InvalidArgument(format!(
                "group index {g} >= number of groups {num_groups}"
            )));
        }
        Ok(TrainData {
            z,
            y,
            groups,
            num_groups,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Mean loss per group over the groups present in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRisks {
    /// Group indices with at least one member, ascending.
    pub groups: Vec<usize>,
    pub risks: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GroupRisks {
    pub fn from_losses(losses: &[f64], groups: &[usize], num_groups: usize) -> Self {
        let mut sums = vec![0.0; num_groups];
        let mut counts = vec![0usize; num_groups];
        for (&l, &g) in losses.iter().zip(groups) {
            sums[g] += l;
            counts[g] += 1;
        }
        let present: Vec<usize> = (0..num_groups).filter(|&g| counts[g] > 0).collect();
        GroupRisks {
            risks: present.iter().map(|&g| sums[g] / counts[g] as f64).collect(),
            counts: present.iter().map(|&g| counts[g]).collect(),
            groups: present,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Position (into `groups`) of the largest risk, ties to the lowest group.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &r) in self.risks.iter().enumerate() {
            if best.is_none_or(|b| r > self.risks[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn argmin(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &r) in self.risks.iter().enumerate() {
            if best.is_none_or(|b| r < self.risks[b]) {
                best = Some(i);
            }
        }
        best
    }
}

pub fn group_risks(data: &TrainData, batch: &[usize], model: &ClassifierModel) -> GroupRisks {
    let losses: Vec<f64> = batch
        .iter()
        .map(|&i| clss_loss(data.y[i], model.predict_one(data.z.row(i))))
        .collect();
    let groups: Vec<usize> = batch.iter().map(|&i| data.groups[i]).collect();
    GroupRisks::from_losses(&losses, &groups, data.num_groups)
}

pub fn fair_loss(risks: &GroupRisks, kind: LossKind) -> f64 {
    match kind {
        LossKind::None => 0.0,
        LossKind::Worst => risks.argmax().map(|i| risks.risks[i]).unwrap_or(0.0),
        LossKind::Gap => match (risks.argmax(), risks.argmin()) {
            (Some(hi), Some(lo)) => risks.risks[hi] - risks.risks[lo],
            _ => 0.0,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub mean_loss: f64,
    pub fair: f64,
    pub risks: Option<GroupRisks>,
}

/// Objective value and its (sub)gradient over a batch.
///
/// The fairness subgradient routes through the argmax (and, for `gap`, the
/// argmin) group, ties broken to the lowest group index.
pub fn objective(
    data: &TrainData,
    batch: &[usize],
    model: &ClassifierModel,
    cfg: &FairnessConfig,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    let mut slopes = Vec::with_capacity(batch.len());
    for &i in batch {
        let (l, s) = loss_and_dlogit(data.y[i], model.logit(data.z.row(i)));
        losses.push(l);
        slopes.push(s);
    }
    let mut mean_loss = 0.0;
    for &l in &losses {
        mean_loss += l;
    }
    mean_loss /= n;

    // Per-sample weight on ∂loss/∂logit.
    let mut coef = vec![1.0 / n; batch.len()];
    let (fair, risks) = if cfg.active() {
        let groups: Vec<usize> = batch.iter().map(|&i| data.groups[i]).collect();
        let risks = GroupRisks::from_losses(&losses, &groups, data.num_groups);
        let fair = fair_loss(&risks, cfg.loss_kind);
        let hi = risks.argmax().expect("non-empty batch");
        let g_hi = risks.groups[hi];
        let c_hi = cfg.lambda / risks.counts[hi] as f64;
        let lo = risks.argmin().expect("non-empty batch");
        let (g_lo, c_lo) = (risks.groups[lo], cfg.lambda / risks.counts[lo] as f64);
        for (c, &g) in coef.iter_mut().zip(&groups) {
            if g == g_hi {
                *c += c_hi;
            }
            if cfg.loss_kind == LossKind::Gap && g == g_lo {
                *c -= c_lo;
            }
        }
        (fair, Some(risks))
    } else {
        (0.0, None)
    };

    let mut grad = vec![0.0; model.params.len()];
    for ((&i, &s), &c) in batch.iter().zip(&slopes).zip(&coef) {
        let scale = s * c;
        if scale != 0.0 {
            model.accumulate_logit_grad(data.z.row(i), scale, &mut grad);
        }
    }
    let value = if cfg.active() {
        mean_loss + cfg.lambda * fair
    } else {
        mean_loss
    };
    Ok((
        ObjectiveValue {
            value,
            mean_loss,
            fair,
            risks,
        },
        grad,
    ))
}

/// Objective value only, evaluated with parameters `params`.
pub fn objective_value(
    data: &TrainData,
    batch: &[usize],
    model: &ClassifierModel,
    params: &[f64],
    cfg: &FairnessConfig,
) -> f64 {
    let probe = ClassifierModel {
        params: params.to_vec(),
        ..model.clone()
    };
    let losses: Vec<f64> = batch
        .iter()
        .map(|&i| clss_loss(data.y[i], probe.predict_one(data.z.row(i))))
        .collect();
    let mean = losses.iter().sum::<f64>() / batch.len() as f64;
    if !cfg.active() {
        return mean;
    }
    let groups: Vec<usize> = batch.iter().map(|&i| data.groups[i]).collect();
    mean + cfg.lambda * fair_loss(&GroupRisks::from_losses(&losses, &groups, data.num_groups), cfg.loss_kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 0.05,
            epochs: 100,
            batch_size: 128,
            patience: 10,
            momentum: 0.0,
            seed: 0,
        }
    }
}

/// Shuffled mini-batches in which each group's members are dealt round-robin,
/// so every batch holds every group that has at least as many members as
/// there are batches.
pub fn stratified_batches(groups: &[usize], num_groups: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let n = groups.len();
    if n == 0 {
        return Vec::new();
    }
    let nb = n.div_ceil(batch_size.max(1));
    let mut batches = vec![Vec::with_capacity(batch_size); nb];
    let mut slot = 0usize;
    for g in 0..num_groups.max(1) {
        let mut members: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
        rng.shuffle(&mut members);
        for i in members {
            batches[slot % nb].push(i);
            slot += 1;
        }
    }
    rng.shuffle(&mut batches);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub objective: f64,
    pub mean_clss: f64,
    pub fair: f64,
    /// Full-training-set risk per group index (`None` when the group has no
    /// training members).
    pub group_risks: Vec<Option<f64>>,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_early: bool,
}

/// Trains on the train split and keeps the epoch with the best validation AUC.
///
/// `groups` supplies group labels for every training record; when absent all
/// records share one group. Requesting an active fairness loss without groups
/// is an error.
pub fn train(
    ds: &EmbeddingDataset,
    groups: Option<&GroupLabels>,
    cfg: &FairnessConfig,
    hyper: &TrainHyper,
    architecture: Architecture,
) -> Result<(ClassifierModel, TrainReport)> {
    cfg.validate()?;
    ds.require_splits()?;
    if cfg.active() && groups.is_none() {
        return Err(Error::NoGroups);
    }
    if !(hyper.lr > 0.0) || hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "lr must be positive; epochs and batch size at least 1".into(),
        ));
    }
    let train_idx = ds.indices(Split::Train);
    let val_idx = ds.indices(Split::Val);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::TooFewSamples("train and val splits must be non-empty".into()));
    }
    let (group_vec, num_groups) = match groups {
        Some(g) => (g.align(ds, &train_idx)?, g.num_groups()),
        None => (vec![0; train_idx.len()], 1),
    };
    let data = TrainData::new(
        ds.embeddings_of(&train_idx),
        ds.labels_of(&train_idx),
        group_vec,
        num_groups,
    )?;
    let val_z = ds.embeddings_of(&val_idx);
    let val_y = ds.labels_of(&val_idx);
    train_on(&data, &val_z, &val_y, cfg, hyper, architecture)
}

/// Training loop over prepared arrays.
pub fn train_on(
    data: &TrainData,
    val_z: &Matrix,
    val_y: &[u8],
    cfg: &FairnessConfig,
    hyper: &TrainHyper,
    architecture: Architecture,
) -> Result<(ClassifierModel, TrainReport)> {
    let rng = Rng::new(hyper.seed);
    let mut model = ClassifierModel::init(architecture, data.z.cols(), &mut rng.child(&[0]));
    let mut velocity = vec![0.0; model.params.len()];
    let mut best = (model.clone(), f64::NEG_INFINITY, 0usize);
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let all = data.all();

    for epoch in 0..hyper.epochs {
        let mut batch_rng = rng.child(&[1, epoch as u64]);
        for batch in stratified_batches(&data.groups, data.num_groups, hyper.batch_size, &mut batch_rng) {
            let (_, grad) = objective(data, &batch, &model, cfg)?;
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = hyper.momentum * *v + g;
                *p -= hyper.lr * *v;
            }
        }
        let (full, _) = objective(data, &all, &model, cfg)?;
        let risks = group_risks(data, &all, &model);
        let mut per_group = vec![None; data.num_groups];
        for (&g, &r) in risks.groups.iter().zip(&risks.risks) {
            per_group[g] = Some(r);
        }
        let val_scores = predict(&model, val_z)?;
        let val_auc = metrics::auc_from(&val_scores, val_y)?;
        epochs.push(EpochStats {
            epoch,
            objective: full.value,
            mean_clss: full.mean_loss,
            fair: fair_loss(&risks, cfg.loss_kind),
            group_risks: per_group,
            val_auc,
        });
        if val_auc > best.1 {
            best = (model.clone(), val_auc, epoch);
        } else if epoch - best.2 >= hyper.patience {
            stopped_early = true;
            break;
        }
    }
    let (model, best_val_auc, best_epoch) = best;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            best_val_auc,
            stopped_early,
        },
    ))
}

pub const MODEL_FORMAT: &str = "lhcf-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub fairness: FairnessConfig,
    pub hyper: TrainHyper,
}

/// On-disk checkpoint. `weights[l]` is layer `l`'s weight matrix (rows are
/// output units) and `biases[l]` its bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub d_in: usize,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub training_config: TrainingConfig,
    pub seed: u64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn from_model(model: &ClassifierModel, config: TrainingConfig, best_epoch: usize) -> Self {
        let d = model.d_in;
        let p = &model.params;
        let (weights, biases) = match model.architecture {
            Architecture::Linear => (vec![vec![p[..d].to_vec()]], vec![vec![p[d]]]),
            Architecture::Mlp { hidden } => {
                let w1 = (0..hidden).map(|h| p[h * d..(h + 1) * d].to_vec()).collect();
                let b1 = p[hidden * d..hidden * d + hidden].to_vec();
                let w2 = vec![p[hidden * d + hidden..hidden * d + 2 * hidden].to_vec()];
                (vec![w1, w2], vec![b1, vec![p[hidden * d + 2 * hidden]]])
            }
        };
        Checkpoint {
            format: MODEL_FORMAT.into(),
            architecture: model.architecture,
            d_in: d,
            weights,
            biases,
            seed: config.hyper.seed,
            training_config: config,
            best_epoch,
        }
    }

    pub fn to_model(&self) -> Result<ClassifierModel> {
        let bad = |what: &str| Error::InvalidArgument(format!("checkpoint {what} has the wrong shape"));
        let d = self.d_in;
        let mut params = Vec::new();
        match self.architecture {
            Architecture::Linear => {
                let w = self.weights.first().and_then(|l| l.first()).ok_or_else(|| bad("weights"))?;
                let b = self.biases.first().and_then(|l| l.first()).ok_or_else(|| bad("biases"))?;
                if w.len() != d || self.weights.len() != 1 {
                    return Err(bad("weights"));
                }
                params.extend_from_slice(w);
                params.push(*b);
            }
            Architecture::Mlp { hidden } => {
                if self.weights.len() != 2 || self.biases.len() != 2 {
                    return Err(bad("layer list"));
                }
                let w1 = &self.weights[0];
                if w1.len() != hidden || w1.iter().any(|r| r.len() != d) {
                    return Err(bad("hidden weights"));
                }
                for r in w1 {
                    params.extend_from_slice(r);
                }
                if self.biases[0].len() != hidden {
                    return Err(bad("hidden biases"));
                }
                params.extend_from_slice(&self.biases[0]);
                let w2 = self.weights[1].first().ok_or_else(|| bad("output weights"))?;
                if w2.len() != hidden || self.biases[1].len() != 1 {
                    return Err(bad("output layer"));
                }
                params.extend_from_slice(w2);
                params.push(self.biases[1][0]);
            }
        }
        Ok(ClassifierModel {
            architecture: self.architecture,
            d_in: d,
            params,
        })
    }
}
