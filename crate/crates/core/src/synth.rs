//! Synthetic embedding populations with known cohort structure, and the
//! exhaustive check that a union of clusters never has a higher empirical
//! risk than its worst member cluster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_splits, AttributeKind, AttributeSchema, EmbeddingDataset, SampleRecord};
use crate::error::{Error, Result};
use crate::numerics::{largest_remainder, Rng};

/// Name of the non-visible attribute carrying the generating cohort.
pub const TRUE_COHORT: &str = "__true_cohort";

/// Either one rate for every cohort or one per cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rates {
    Uniform(f64),
    PerCohort(Vec<f64>),
}

impl Rates {
    pub fn expand(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            Rates::Uniform(r) => Ok(vec![*r; k]),
            Rates::PerCohort(v) if v.len() == k => Ok(v.clone()),
            Rates::PerCohort(v) => Err(Error::InvalidSpec(format!(
                "expected {k} per-cohort rates, got {}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAttribute {
    pub name: String,
    pub cardinality: usize,
    /// Probability that a sample takes its cohort's mapped category
    /// (`cohort mod cardinality`) instead of a uniform draw.
    pub alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(rename = "K_true")]
    pub k_true: usize,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Distance between any two cohort means, in within-cohort σ.
    pub separation: f64,
    pub flip_rates: Rates,
    pub positive_rates: Rates,
    #[serde(default)]
    pub attributes: Vec<SynthAttribute>,
    pub seed: u64,
    /// Relative cohort sizes; uniform when absent.
    #[serde(default)]
    pub cohort_weights: Option<Vec<f64>>,
    /// Shift between class-conditional means along each cohort's signal
    /// direction. Zero makes labels independent of position within a cohort.
    #[serde(default = "default_label_signal")]
    pub label_signal: Rates,
    /// Cosine between each cohort's signal direction and a direction shared
    /// by all cohorts. Negative values reverse the shared component.
    #[serde(default = "default_overlap")]
    pub signal_overlap: Rates,
    /// Train/val/test fractions; the dataset is left unsplit when absent.
    #[serde(default = "default_splits")]
    pub splits: Option<[f64; 3]>,
}

fn default_label_signal() -> Rates {
    Rates::Uniform(0.0)
}

fn default_overlap() -> Rates {
    Rates::Uniform(1.0)
}

fn default_splits() -> Option<[f64; 3]> {
    Some([0.6, 0.2, 0.2])
}

impl SynthSpec {
    /// A small spec with `k` equal cohorts and no attributes.
    pub fn simple(k: usize, d: usize, n: usize, separation: f64, seed: u64) -> Self {
        SynthSpec {
            k_true: k,
            d,
            n,
            separation,
            flip_rates: Rates::Uniform(0.0),
            positive_rates: Rates::Uniform(0.5),
            attributes: Vec::new(),
            seed,
            cohort_weights: None,
            label_signal: default_label_signal(),
            signal_overlap: default_overlap(),
            splits: default_splits(),
        }
    }

    /// Six cohorts of unequal size and difficulty with `gender` (2 values)
    /// and `age` (4 values) weakly tied to cohort membership.
    pub fn benchmark(seed: u64) -> Self {
        SynthSpec {
            k_true: 6,
            d: 8,
            n: 6000,
            separation: 5.0,
            flip_rates: Rates::PerCohort(vec![0.02, 0.04, 0.08, 0.10, 0.06, 0.05]),
            positive_rates: Rates::PerCohort(vec![0.5, 0.4, 0.6, 0.3, 0.5, 0.4]),
            attributes: vec![
                SynthAttribute {
                    name: "gender".into(),
                    cardinality: 2,
                    alignment: 0.35,
                },
                SynthAttribute {
                    name: "age".into(),
                    cardinality: 4,
                    alignment: 0.35,
                },
            ],
            seed,
            cohort_weights: Some(vec![0.22, 0.22, 0.14, 0.14, 0.14, 0.14]),
            // Cohorts 2 and 3 separate their classes mostly along their own
            // directions, against the direction the other cohorts share.
            label_signal: Rates::PerCohort(vec![2.5, 2.5, 3.5, 3.5, 2.5, 2.5]),
            signal_overlap: Rates::PerCohort(vec![1.0, 1.0, -0.3, -0.3, 1.0, 1.0]),
            splits: default_splits(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.k_true == 0 {
            return bad("K_true must be at least 1".into());
        }
        if self.d == 0 || self.d + 1 < self.k_true {
            return bad(format!(
                "d = {} cannot hold a simplex of {} cohorts (need d >= K_true - 1)",
                self.d, self.k_true
            ));
        }
        if self.n < self.k_true {
            return bad(format!("N = {} is smaller than K_true = {}", self.n, self.k_true));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        for (i, f) in self.flip_rates.expand(self.k_true)?.iter().enumerate() {
            if !(0.0..0.5).contains(f) {
                return bad(format!("flip rate {f} for cohort {i} outside [0, 0.5)"));
            }
        }
        for (i, p) in self.positive_rates.expand(self.k_true)?.iter().enumerate() {
            if !(*p > 0.0 && *p < 1.0) {
                return bad(format!("positive rate {p} for cohort {i} outside (0, 1)"));
            }
        }
        for (i, s) in self.label_signal.expand(self.k_true)?.iter().enumerate() {
            if !(*s >= 0.0 && s.is_finite()) {
                return bad(format!("label signal {s} for cohort {i} must be finite and >= 0"));
            }
        }
        for (i, o) in self.signal_overlap.expand(self.k_true)?.iter().enumerate() {
            if !(-1.0..=1.0).contains(o) {
                return bad(format!("signal overlap {o} for cohort {i} outside [-1, 1]"));
            }
        }
        if let Some(w) = &self.cohort_weights {
            if w.len() != self.k_true || w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return bad("cohort_weights needs K_true positive entries".into());
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.attributes {
            if a.name == TRUE_COHORT || !names.insert(a.name.as_str()) {
                return bad(format!("attribute name `{}` is reserved or repeated", a.name));
            }
            if a.cardinality < 2 {
                return bad(format!("attribute `{}` needs cardinality >= 2", a.name));
            }
            if !(0.0..=1.0).contains(&a.alignment) {
                return bad(format!("attribute `{}` alignment outside [0, 1]", a.name));
            }
            if a.alignment == 1.0 && a.cardinality > self.k_true {
                return bad(format!(
                    "attribute `{}` with alignment 1 needs cardinality <= K_true",
                    a.name
                ));
            }
        }
        if let Some(f) = self.splits {
            if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("split fractions {f:?} must be positive and sum to 1"));
            }
        }
        Ok(())
    }
}

/// Vertices of a regular simplex with edge length `edge`, centred at the
/// origin, embedded in the first `k - 1` of `d` coordinates.
pub fn simplex_means(k: usize, d: usize, edge: f64) -> Vec<Vec<f64>> {
    // Helmert basis of the sum-zero subspace applied to scaled unit vectors.
    let scale = edge / std::f64::consts::SQRT_2;
    let mut means = vec![vec![0.0; d]; k];
    for j in 1..k {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for (i, m) in means.iter_mut().enumerate() {
            m[j - 1] = scale
                * match i.cmp(&j) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(j as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                };
        }
    }
    means
}

fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Per-cohort unit directions along which the classes separate.
pub fn signal_directions(d: usize, overlap: &[f64], rng: &mut Rng) -> Vec<Vec<f64>> {
    let shared = unit_vector(d, rng);
    overlap
        .iter()
        .map(|&overlap| {
            let own = unit_vector(d, rng);
            // Component of `own` orthogonal to `shared`.
            let c: f64 = own.iter().zip(&shared).map(|(a, b)| a * b).sum();
            let mut perp: Vec<f64> = own.iter().zip(&shared).map(|(a, b)| a - c * b).collect();
            let pn = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
            if pn > 1e-12 {
                perp.iter_mut().for_each(|x| *x /= pn);
            }
            let s = (1.0 - overlap * overlap).max(0.0).sqrt();
            shared.iter().zip(&perp).map(|(a, b)| overlap * a + s * b).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: EmbeddingDataset,
    /// Generating cohort of each record, in record order.
    pub cohorts: Vec<usize>,
}

/// Draws a dataset from `spec`. Identical specs give identical output.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let k = spec.k_true;
    let d = spec.d;
    let flips = spec.flip_rates.expand(k)?;
    let pos = spec.positive_rates.expand(k)?;
    let signal = spec.label_signal.expand(k)?;
    let root = Rng::new(spec.seed);

    let means = simplex_means(k, d, spec.separation);
    let overlap = spec.signal_overlap.expand(k)?;
    let directions = signal_directions(d, &overlap, &mut root.child(&[0]));

    let weights = spec.cohort_weights.clone().unwrap_or_else(|| vec![1.0; k]);
    let counts = largest_remainder(spec.n, &weights);
    let mut cohorts: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    root.child(&[1]).shuffle(&mut cohorts);

    let mut sample_rng = root.child(&[2]);
    let mut attr_rng = root.child(&[3]);
    let mut records = Vec::with_capacity(spec.n);
    for (i, &c) in cohorts.iter().enumerate() {
        let clean = u8::from(sample_rng.uniform() < pos[c]);
        let y = if sample_rng.uniform() < flips[c] { 1 - clean } else { clean };
        let shift = signal[c] * (f64::from(clean) - 0.5);
        let z: Vec<f64> = (0..d)
            .map(|j| means[c][j] + shift * directions[c][j] + sample_rng.normal())
            .collect();
        let mut attrs = BTreeMap::new();
        for a in &spec.attributes {
            let v = if attr_rng.uniform() < a.alignment {
                c % a.cardinality
            } else {
                attr_rng.below(a.cardinality)
            };
            attrs.insert(a.name.clone(), v);
        }
        attrs.insert(TRUE_COHORT.to_string(), c);
        records.push(SampleRecord {
            id: format!("s{i:06}"),
            z,
            y,
            attrs,
        });
    }

    let mut schema: Vec<AttributeSchema> = spec
        .attributes
        .iter()
        .map(|a| AttributeSchema {
            name: a.name.clone(),
            kind: AttributeKind::Categorical,
            values: (0..a.cardinality).map(|v| v.to_string()).collect(),
            visible: true,
        })
        .collect();
    schema.push(AttributeSchema {
        name: TRUE_COHORT.to_string(),
        kind: AttributeKind::Categorical,
        values: (0..k.max(2)).map(|v| v.to_string()).collect(),
        visible: false,
    });
    let mut dataset = EmbeddingDataset::new(d, schema, records)?;
    if let Some(f) = spec.splits {
        dataset = make_splits(&dataset, (f[0], f[1], f[2]), &mut root.child(&[4]))?;
    }
    Ok(SynthOutput { dataset, cohorts })
}

/// Per-cluster mean loss and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRisk {
    pub risk: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheckResult {
    #[serde(rename = "K")]
    pub k: usize,
    pub risks: Vec<f64>,
    pub max_risk: f64,
    /// Union risk of every non-empty subset; bit `j` of the index selects cluster `j`.
    pub union_risks: Vec<f64>,
    pub max_violation: f64,
    pub holds: bool,
}

pub const LEMMA_TOLERANCE: f64 = 1e-12;
pub const MAX_ENUMERATED_CLUSTERS: usize = 20;

/// Checks every union of clusters against the worst single-cluster risk.
/// Clusters with zero count are ignored.
pub fn lemma1_check(clusters: &[ClusterRisk]) -> Result<LemmaCheckResult> {
    let live: Vec<&ClusterRisk> = clusters.iter().filter(|c| c.count > 0).collect();
    let k = live.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    if k > MAX_ENUMERATED_CLUSTERS {
        return Err(Error::TooManyClusters(k));
    }
    if live.iter().any(|c| !c.risk.is_finite()) {
        return Err(Error::InvalidArgument("cluster risks must be finite".into()));
    }
    let max_risk = live.iter().map(|c| c.risk).fold(f64::NEG_INFINITY, f64::max);
    let mut union_risks = Vec::with_capacity((1usize << k) - 1);
    let mut max_violation = 0.0f64;
    for mask in 1usize..(1 << k) {
        let mut weighted = 0.0;
        let mut total = 0usize;
        for (j, c) in live.iter().enumerate() {
            if mask & (1 << j) != 0 {
                weighted += c.count as f64 * c.risk;
                total += c.count;
            }
        }
        let l = weighted / total as f64;
        max_violation = max_violation.max(l - max_risk);
        union_risks.push(l);
    }
    Ok(LemmaCheckResult {
        k,
        risks: live.iter().map(|c| c.risk).collect(),
        max_risk,
        union_risks,
        max_violation,
        holds: max_violation <= LEMMA_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_has_equal_edges() {
        for k in 1..=6 {
            let m = simplex_means(k, 7, 4.0);
            for a in 0..k {
                for b in a + 1..k {
                    let dist: f64 = m[a]
                        .iter()
                        .zip(&m[b])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    assert!((dist - 4.0).abs() < 1e-12, "k={k} {a},{b}: {dist}");
                }
            }
            for j in 0..7 {
                let s: f64 = m.iter().map(|v| v[j]).sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lemma_examples() {
        let r = lemma1_check(&[ClusterRisk { risk: 0.3, count: 5 }]).unwrap();
        assert!(r.holds);
        assert_eq!(r.max_violation, 0.0);
        let r = lemma1_check(&[
            ClusterRisk { risk: 0.2, count: 10 },
            ClusterRisk { risk: 0.8, count: 10 },
        ])
        .unwrap();
        assert!(r.holds);
        assert!((r.union_risks[2] - 0.5).abs() < 1e-15);
        let many: Vec<ClusterRisk> = (0..21).map(|_| ClusterRisk { risk: 0.1, count: 1 }).collect();
        assert!(matches!(lemma1_check(&many), Err(Error::TooManyClusters(21))));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::simple(3, 4, 300, 6.0, 9);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn invalid_specs() {
        let mut s = SynthSpec::simple(5, 3, 100, 4.0, 0);
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        s.d = 4;
        s.flip_rates = Rates::Uniform(0.5);
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        s.flip_rates = Rates::PerCohort(vec![0.1; 4]);
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        s.flip_rates = Rates::Uniform(0.1);
        s.attributes.push(SynthAttribute {
            name: "a".into(),
            cardinality: 6,
            alignment: 1.0,
        });
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn full_alignment_is_deterministic() {
        let mut s = SynthSpec::simple(4, 4, 400, 5.0, 3);
        s.attributes.push(SynthAttribute {
            name: "a".into(),
            cardinality: 4,
            alignment: 1.0,
        });
        let out = generate(&s).unwrap();
        let attr: Vec<usize> = out.dataset.records.iter().map(|r| r.attrs["a"]).collect();
        assert_eq!(crate::metrics::average_purity(&out.cohorts, &attr), 1.0);
    }
}
