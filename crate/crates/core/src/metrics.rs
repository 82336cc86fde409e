//! Evaluation: AUC, visible-cohort fairness scores, per-cohort calibration and
//! alignment between hidden cohorts and visible attributes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{intersect_attributes, EmbeddingDataset, GroupLabels, Split, VisibleCohortPartition};
use crate::error::{Error, Result};
use crate::trainer::{clss_loss, predict, ClassifierModel};

/// Scores with binary labels and optional group membership.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub groups: Option<Vec<usize>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                got: labels.len(),
                context: Some("scores vs labels".into()),
            });
        }
        if scores.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(ScoredSet {
            scores,
            labels,
            groups: None,
        })
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        if groups.len() != self.scores.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scores.len(),
                got: groups.len(),
                context: Some("groups vs scores".into()),
            });
        }
        self.groups = Some(groups);
        Ok(self)
    }
}

/// Mann–Whitney AUC with ties counted one half, via mid-ranks.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    auc_from(&s.scores, &s.labels)
}

pub fn auc_from(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(None));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the mid-rank (i+1+j)/2.
        let mid = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] == 1 {
                pos_rank_sum += mid;
            }
        }
        i = j;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn brier(s: &ScoredSet) -> f64 {
    brier_from(&s.scores, &s.labels)
}

pub fn brier_from(scores: &[f64], labels: &[u8]) -> f64 {
    let mut acc = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        let r = p - f64::from(y);
        acc += r * r;
    }
    acc / scores.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub partition: String,
    pub group: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub overall_auc: f64,
    pub per_group_auc: BTreeMap<String, f64>,
    pub min_auc: f64,
    pub auc_gap: f64,
    pub es_auc: f64,
    pub mean_psd: f64,
    pub max_psd: f64,
    #[serde(default)]
    pub exclusions: Vec<Exclusion>,
}

impl FairnessReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "overall_auc" => self.overall_auc,
            "min_auc" => self.min_auc,
            "auc_gap" => self.auc_gap,
            "es_auc" => self.es_auc,
            "mean_psd" => self.mean_psd,
            "max_psd" => self.max_psd,
            _ => return None,
        })
    }
}

/// Names accepted by [`FairnessReport::metric`], with "higher is better" flags.
pub const FAIRNESS_METRICS: [(&str, bool); 6] = [
    ("overall_auc", true),
    ("min_auc", true),
    ("auc_gap", false),
    ("es_auc", true),
    ("mean_psd", false),
    ("max_psd", false),
];

/// Fairness summary from an overall AUC and per-group AUCs.
pub fn summarize_group_aucs(
    overall: f64,
    per_group: BTreeMap<String, f64>,
    exclusions: Vec<Exclusion>,
) -> FairnessReport {
    let aucs: Vec<f64> = per_group.values().copied().collect();
    let (min_auc, max_auc) = if aucs.is_empty() {
        (overall, overall)
    } else {
        (
            aucs.iter().copied().fold(f64::INFINITY, f64::min),
            aucs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let gap = max_auc - min_auc;
    let mut dev = 0.0;
    for a in &aucs {
        dev += (overall - a).abs();
    }
    // Zero dispersion scales to zero even when the overall AUC is 0.
    let scaled = |x: f64| if x == 0.0 { 0.0 } else { x / overall };
    FairnessReport {
        overall_auc: overall,
        es_auc: overall / (1.0 + dev),
        mean_psd: if aucs.is_empty() {
            0.0
        } else {
            scaled(dev / aucs.len() as f64)
        },
        max_psd: scaled(gap),
        min_auc,
        auc_gap: gap,
        per_group_auc: per_group,
        exclusions,
    }
}

/// Per-group AUCs and derived fairness scores. Groups lacking a class are
/// listed in `exclusions` and do not enter the summary.
pub fn fairness_report(s: &ScoredSet, group_names: &[String]) -> Result<FairnessReport> {
    let overall = auc(s)?;
    let groups = s
        .groups
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("fairness report needs group labels".into()))?;
    let mut per_group = BTreeMap::new();
    let mut exclusions = Vec::new();
    for (g, name) in group_names.iter().enumerate() {
        let (sc, lb): (Vec<f64>, Vec<u8>) = s
            .scores
            .iter()
            .zip(&s.labels)
            .zip(groups)
            .filter(|(_, &gg)| gg == g)
            .map(|((&p, &y), _)| (p, y))
            .unzip();
        if sc.is_empty() {
            continue;
        }
        match auc_from(&sc, &lb) {
            Ok(a) => {
                per_group.insert(name.clone(), a);
            }
            Err(_) => exclusions.push(Exclusion {
                partition: String::new(),
                group: name.clone(),
                reason: format!("single class ({} samples, all label {})", sc.len(), lb[0]),
            }),
        }
    }
    Ok(summarize_group_aucs(overall, per_group, exclusions))
}

/// Cluster-size-weighted majority purity: `Σ_k |C_k|/N · max_g |C_k ∩ G_g|/|C_k|`.
pub fn average_purity(cohorts: &[usize], groups: &[usize]) -> f64 {
    let n = cohorts.len().min(groups.len());
    if n == 0 {
        return 0.0;
    }
    let mut table: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&c, &g) in cohorts.iter().zip(groups) {
        *table.entry(c).or_default().entry(g).or_default() += 1;
    }
    let mut majority = 0usize;
    for row in table.values() {
        majority += row.values().copied().max().unwrap_or(0);
    }
    majority as f64 / n as f64
}

/// Average purity of hidden cohorts against a visible partition, over the
/// records that carry both labels.
pub fn average_purity_of(cohorts: &GroupLabels, partition: &VisibleCohortPartition) -> f64 {
    let visible = GroupLabels::from(partition);
    let (c, g): (Vec<usize>, Vec<usize>) = cohorts
        .by_id
        .iter()
        .filter_map(|(id, &c)| visible.of(id).map(|g| (c, g)))
        .unzip();
    average_purity(&c, &g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_note: Option<String>,
    pub brier: f64,
    /// Mean cross-entropy of the group's members.
    pub risk: f64,
}

fn group_stats(scores: &[f64], labels: &[u8]) -> GroupStats {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let (auc, auc_note) = match auc_from(scores, labels) {
        Ok(a) => (Some(a), None),
        Err(_) => (None, Some("single class".to_string())),
    };
    let mut risk = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        risk += clss_loss(y, p);
    }
    GroupStats {
        n: scores.len(),
        positives,
        auc,
        auc_note,
        brier: brier_from(scores, labels),
        risk: risk / scores.len().max(1) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortQualityReport {
    pub per_cohort: BTreeMap<String, GroupStats>,
    /// Average purity per visible attribute.
    pub average_purity: BTreeMap<String, f64>,
}

/// Per-cohort Brier/AUC for `split` and average purity of the cohorts
/// against every visible attribute.
pub fn cohort_quality(
    ds: &EmbeddingDataset,
    cohorts: &GroupLabels,
    model: &ClassifierModel,
    split: Option<Split>,
) -> Result<CohortQualityReport> {
    let idx: Vec<usize> = match split {
        Some(s) => ds.indices(s),
        None => (0..ds.len()).collect(),
    };
    let scores = predict(model, &ds.embeddings_of(&idx))?;
    let labels = ds.labels_of(&idx);
    let membership = cohorts.align(ds, &idx)?;
    let mut per_cohort = BTreeMap::new();
    for (c, name) in cohorts.names.iter().enumerate() {
        let (sc, lb): (Vec<f64>, Vec<u8>) = membership
            .iter()
            .zip(scores.iter().zip(&labels))
            .filter(|(&m, _)| m == c)
            .map(|(_, (&p, &y))| (p, y))
            .unzip();
        if !sc.is_empty() {
            per_cohort.insert(name.clone(), group_stats(&sc, &lb));
        }
    }
    let ids: std::collections::BTreeSet<&str> = idx.iter().map(|&i| ds.records[i].id.as_str()).collect();
    let subset = GroupLabels {
        names: cohorts.names.clone(),
        by_id: cohorts
            .by_id
            .iter()
            .filter(|(id, _)| ids.contains(id.as_str()))
            .map(|(id, &c)| (id.clone(), c))
            .collect(),
    };
    let mut average_purity = BTreeMap::new();
    for attr in ds.visible_attributes() {
        let p = intersect_attributes(ds, &[attr.name.as_str()])?;
        average_purity.insert(attr.name.clone(), average_purity_of(&subset, &p));
    }
    Ok(CohortQualityReport {
        per_cohort,
        average_purity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRisk {
    pub cohort: usize,
    pub risk: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallStats {
    pub n: usize,
    pub positives: usize,
    pub auc: f64,
    pub brier: f64,
}

pub const REPORT_FORMAT: &str = "lhcf-eval/1";
/// Fairness key used for the hidden-cohort partition in reports.
pub const HIDDEN_PARTITION: &str = "hidden";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub split: String,
    pub overall: OverallStats,
    pub per_group: BTreeMap<String, BTreeMap<String, GroupStats>>,
    pub fairness: BTreeMap<String, FairnessReport>,
    pub cohort_quality: Option<CohortQualityReport>,
    pub cohort_risks: Option<Vec<CohortRisk>>,
    pub exclusions: Vec<Exclusion>,
}

/// Scores `split` and reports fairness for each visible partition, plus
/// hidden-cohort quality when `cohorts` is given.
pub fn evaluate(
    ds: &EmbeddingDataset,
    model: &ClassifierModel,
    cohorts: Option<&GroupLabels>,
    partitions: &[VisibleCohortPartition],
    split: Split,
) -> Result<EvalReport> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::TooFewSamples(format!("{} split is empty", split.as_str())));
    }
    let scores = predict(model, &ds.embeddings_of(&idx))?;
    let labels = ds.labels_of(&idx);
    let overall_auc = auc_from(&scores, &labels)
        .map_err(|_| Error::SingleClass(Some(format!("{} split", split.as_str()))))?;
    let overall = OverallStats {
        n: idx.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
        auc: overall_auc,
        brier: brier_from(&scores, &labels),
    };

    let mut named: Vec<(String, GroupLabels)> = partitions
        .iter()
        .map(|p| (p.name.clone(), GroupLabels::from(p)))
        .collect();
    if let Some(c) = cohorts {
        named.push((HIDDEN_PARTITION.to_string(), c.clone()));
    }

    let mut per_group = BTreeMap::new();
    let mut fairness = BTreeMap::new();
    let mut exclusions = Vec::new();
    for (name, labels_of) in &named {
        // Records outside the partition (missing attributes) are skipped.
        let members: Vec<(usize, usize)> = idx
            .iter()
            .enumerate()
            .filter_map(|(pos, &i)| labels_of.of(&ds.records[i].id).map(|g| (pos, g)))
            .collect();
        let sc: Vec<f64> = members.iter().map(|&(p, _)| scores[p]).collect();
        let lb: Vec<u8> = members.iter().map(|&(p, _)| labels[p]).collect();
        let gs: Vec<usize> = members.iter().map(|&(_, g)| g).collect();
        let mut stats = BTreeMap::new();
        for (g, gname) in labels_of.names.iter().enumerate() {
            let (s2, l2): (Vec<f64>, Vec<u8>) = gs
                .iter()
                .zip(sc.iter().zip(&lb))
                .filter(|(&gg, _)| gg == g)
                .map(|(_, (&p, &y))| (p, y))
                .unzip();
            if !s2.is_empty() {
                stats.insert(gname.clone(), group_stats(&s2, &l2));
            }
        }
        per_group.insert(name.clone(), stats);
        if sc.is_empty() {
            continue;
        }
        let set = ScoredSet::new(sc, lb)?.with_groups(gs)?;
        let mut report = fairness_report(&set, &labels_of.names)?;
        for e in &mut report.exclusions {
            e.partition = name.clone();
        }
        exclusions.extend(report.exclusions.iter().cloned());
        fairness.insert(name.clone(), report);
    }

    let (cohort_quality, cohort_risks) = match cohorts {
        Some(c) => {
            let q = cohort_quality(ds, c, model, Some(split))?;
            let risks = c
                .names
                .iter()
                .enumerate()
                .filter_map(|(k, name)| {
                    q.per_cohort.get(name).map(|s| CohortRisk {
                        cohort: k,
                        risk: s.risk,
                        count: s.n,
                    })
                })
                .collect();
            (Some(q), Some(risks))
        }
        None => (None, None),
    };

    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        meta: BTreeMap::new(),
        split: split.as_str().into(),
        overall,
        per_group,
        fairness,
        cohort_quality,
        cohort_risks,
        exclusions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pos: &[f64], neg: &[f64]) -> ScoredSet {
        let mut scores = pos.to_vec();
        scores.extend_from_slice(neg);
        let labels = pos.iter().map(|_| 1).chain(neg.iter().map(|_| 0)).collect();
        ScoredSet::new(scores, labels).unwrap()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.9, 0.8], &[0.2, 0.1])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.4, 0.4], &[0.4, 0.4, 0.4])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.8, 0.4], &[0.6, 0.2])).unwrap(), 0.75);
        assert!(matches!(
            auc(&set(&[0.8, 0.4], &[])),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&set(&[1.0, 1.0], &[0.0])), 0.0);
        assert_eq!(brier(&set(&[0.5], &[0.5, 0.5])), 0.25);
        let tiny = ScoredSet::new(vec![0.007; 10], vec![0; 10]).unwrap();
        assert!((brier(&tiny) - 4.9e-5).abs() < 1e-12);
    }

    #[test]
    fn fairness_fixed_points() {
        let base = set(&[0.9, 0.6, 0.7], &[0.3, 0.65, 0.1]);
        let mut s = base.clone();
        s.scores.extend(base.scores.clone());
        s.labels.extend(base.labels.clone());
        let s = s.with_groups(vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]).unwrap();
        let r = fairness_report(&s, &["a".into(), "b".into()]).unwrap();
        assert_eq!(r.auc_gap, 0.0);
        assert_eq!(r.mean_psd, 0.0);
        assert_eq!(r.max_psd, 0.0);
        assert_eq!(r.es_auc, r.overall_auc);
    }

    #[test]
    fn fairness_formulas() {
        let groups: BTreeMap<String, f64> = [("a".to_string(), 0.85), ("b".to_string(), 0.95)].into();
        let r = summarize_group_aucs(0.9, groups, vec![]);
        assert!((r.es_auc - 0.9 / 1.1).abs() < 1e-12);
        assert!((r.max_psd - 0.1 / 0.9).abs() < 1e-12);
        assert!((r.mean_psd - 0.05 / 0.9).abs() < 1e-12);
        assert!((r.min_auc - 0.85).abs() < 1e-15);

        let single = set(&[0.9, 0.2], &[0.3, 0.1]).with_groups(vec![0; 4]).unwrap();
        let r = fairness_report(&single, &["all".into()]).unwrap();
        assert_eq!(r.auc_gap, 0.0);
        assert_eq!(r.min_auc, r.overall_auc);
    }

    #[test]
    fn single_class_groups_are_excluded() {
        let s = set(&[0.9, 0.8], &[0.2, 0.1, 0.5])
            .with_groups(vec![0, 0, 0, 1, 1])
            .unwrap();
        let r = fairness_report(&s, &["mixed".into(), "negatives".into()]).unwrap();
        assert_eq!(r.per_group_auc.len(), 1);
        assert_eq!(r.exclusions.len(), 1);
        assert_eq!(r.exclusions[0].group, "negatives");
    }

    #[test]
    fn purity_examples() {
        let c = vec![0, 0, 1, 1];
        assert_eq!(average_purity(&c, &c), 1.0);
        assert_eq!(average_purity(&[0, 0, 1, 1], &[0, 1, 0, 1]), 0.5);
        // cohorts of 60 and 40 with majority fractions 0.7 and 0.9
        let mut cohorts = vec![0; 60];
        cohorts.extend(vec![1; 40]);
        let mut groups = vec![0; 42];
        groups.extend(vec![1; 18]);
        groups.extend(vec![1; 36]);
        groups.extend(vec![0; 4]);
        assert!((average_purity(&cohorts, &groups) - 0.78).abs() < 1e-12);
    }
}
