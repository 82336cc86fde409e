//! Hidden-cohort discovery: Gaussian mixtures fitted by EM, model order chosen
//! by BIC, and hard cohort labels taken as the responsibility argmax.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, GroupLabels, Split};
use crate::error::{Error, Result};
use crate::numerics::{
    column_means, covariance, diag_log_density, log_sum_exp, ridge_for, symmetric_eigen,
    GaussianFactor, Matrix, Rng,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once `(ℓ_t − ℓ_{t−1}) < tol · |ℓ_{t−1}|`.
    pub tol: f64,
    pub covariance: CovarianceKind,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 300,
            tol: 1e-6,
            covariance: CovarianceKind::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub k: usize,
    pub covariance: CovarianceKind,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal models store diagonal matrices here.
    pub covariances: Vec<Matrix>,
    /// Ridge added to every covariance estimate during the fit.
    pub ridge: f64,
    pub log_likelihood: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood evaluated before each M-step, plus the final value.
    pub history: Vec<f64>,
    /// Indices in `history` of the first value after a component reseed.
    pub reseeds: Vec<usize>,
}

impl GmmModel {
    pub fn dim(&self) -> usize {
        self.means.first().map(|m| m.len()).unwrap_or(0)
    }

    pub fn free_parameters(&self) -> usize {
        free_parameters(self.k, self.dim(), self.covariance)
    }
}

/// `(K−1) + Kd + K·d(d+1)/2` for full covariances, `(K−1) + 2Kd` for diagonal.
pub fn free_parameters(k: usize, d: usize, kind: CovarianceKind) -> usize {
    match kind {
        CovarianceKind::Full => (k - 1) + k * d + k * d * (d + 1) / 2,
        CovarianceKind::Diagonal => (k - 1) + 2 * k * d,
    }
}

pub fn bic(model: &GmmModel, n: usize, d: usize) -> f64 {
    let p = free_parameters(model.k, d, model.covariance) as f64;
    p * (n as f64).ln() - 2.0 * model.log_likelihood
}

enum ComponentDensity {
    Full(GaussianFactor),
    Diagonal(Vec<f64>),
}

fn factorize(covariances: &[Matrix], kind: CovarianceKind) -> Result<Vec<ComponentDensity>> {
    covariances
        .iter()
        .map(|s| match kind {
            CovarianceKind::Full => GaussianFactor::new(s).map(ComponentDensity::Full),
            CovarianceKind::Diagonal => {
                let diag = s.diag();
                match diag.iter().position(|&v| !(v > 0.0)) {
                    Some(p) => Err(Error::NotPositiveDefinite {
                        pivot: p,
                        value: diag[p],
                    }),
                    None => Ok(ComponentDensity::Diagonal(diag)),
                }
            }
        })
        .collect()
}

/// `log π_k + log N(z_i | μ_k, Σ_k)` for every row, plus row-wise normalizers.
fn weighted_log_densities(
    z: &Matrix,
    weights: &[f64],
    means: &[Vec<f64>],
    covariances: &[Matrix],
    kind: CovarianceKind,
) -> Result<(Matrix, Vec<f64>)> {
    let k = weights.len();
    let factors = factorize(covariances, kind)?;
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut out = Matrix::zeros(z.rows(), k);
    let mut norms = Vec::with_capacity(z.rows());
    let mut scratch = vec![0.0; z.cols()];
    for i in 0..z.rows() {
        let row = z.row(i);
        for c in 0..k {
            let ld = match &factors[c] {
                ComponentDensity::Full(f) => f.log_density_with(row, &means[c], &mut scratch),
                ComponentDensity::Diagonal(v) => diag_log_density(row, &means[c], v),
            };
            out[(i, c)] = log_w[c] + ld;
        }
        norms.push(log_sum_exp(out.row(i))?);
    }
    Ok((out, norms))
}

fn responsibilities_from(mut logp: Matrix, norms: &[f64]) -> Matrix {
    for (i, &norm) in norms.iter().enumerate() {
        for v in logp.row_mut(i) {
            *v = (*v - norm).exp();
        }
    }
    logp
}

/// Posterior component probabilities, one row per sample.
pub fn e_step(z: &Matrix, model: &GmmModel) -> Result<Matrix> {
    check_dim(z, model)?;
    let (logp, norms) = weighted_log_densities(
        z,
        &model.weights,
        &model.means,
        &model.covariances,
        model.covariance,
    )?;
    Ok(responsibilities_from(logp, &norms))
}

pub fn log_likelihood(z: &Matrix, model: &GmmModel) -> Result<f64> {
    check_dim(z, model)?;
    let (_, norms) = weighted_log_densities(
        z,
        &model.weights,
        &model.means,
        &model.covariances,
        model.covariance,
    )?;
    Ok(norms.iter().sum())
}

fn check_dim(z: &Matrix, model: &GmmModel) -> Result<()> {
    if z.cols() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: z.cols(),
            context: Some("embedding width vs mixture".into()),
        });
    }
    Ok(())
}

/// Mixture parameters re-estimated from responsibilities.
#[derive(Debug, Clone)]
pub struct MStep {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Matrix>,
    /// Effective count `Σ_i γ_ik` per component.
    pub masses: Vec<f64>,
}

pub fn m_step(z: &Matrix, gamma: &Matrix, kind: CovarianceKind, ridge: f64) -> MStep {
    let (n, d, k) = (z.rows(), z.cols(), gamma.cols());
    let mut masses = vec![0.0; k];
    for i in 0..n {
        for c in 0..k {
            masses[c] += gamma[(i, c)];
        }
    }
    let weights: Vec<f64> = masses.iter().map(|m| m / n as f64).collect();
    let mut means = vec![vec![0.0; d]; k];
    for i in 0..n {
        let row = z.row(i);
        for c in 0..k {
            let g = gamma[(i, c)];
            for (m, v) in means[c].iter_mut().zip(row) {
                *m += g * v;
            }
        }
    }
    for c in 0..k {
        let mass = masses[c];
        if mass > 0.0 {
            means[c].iter_mut().for_each(|m| *m /= mass);
        }
    }
    let mut covariances = vec![Matrix::zeros(d, d); k];
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let row = z.row(i);
        for c in 0..k {
            let g = gamma[(i, c)];
            if g == 0.0 {
                continue;
            }
            for ((t, a), b) in diff.iter_mut().zip(row).zip(&means[c]) {
                *t = a - b;
            }
            let cov = &mut covariances[c];
            match kind {
                CovarianceKind::Full => {
                    for a in 0..d {
                        let ga = g * diff[a];
                        for b in 0..=a {
                            cov[(a, b)] += ga * diff[b];
                        }
                    }
                }
                CovarianceKind::Diagonal => {
                    for a in 0..d {
                        cov[(a, a)] += g * diff[a] * diff[a];
                    }
                }
            }
        }
    }
    for c in 0..k {
        let mass = masses[c];
        let cov = &mut covariances[c];
        for a in 0..d {
            for b in 0..=a {
                let v = if mass > 0.0 { cov[(a, b)] / mass } else { 0.0 };
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        cov.add_ridge(ridge);
    }
    MStep {
        weights,
        means,
        covariances,
        masses,
    }
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance to the nearest chosen centre.
pub fn kmeans_pp_seeds(z: &Matrix, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = z.rows();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match rng.weighted_index(&dist) {
            Some(i) => i,
            None => {
                // All remaining points coincide with a centre.
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.below(free.len())]
            }
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    chosen
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s
}

fn min_mass(kind: CovarianceKind, d: usize) -> usize {
    match kind {
        CovarianceKind::Full => d + 1,
        CovarianceKind::Diagonal => 2,
    }
}

fn global_covariance(z: &Matrix, kind: CovarianceKind) -> (Matrix, f64) {
    let mean = column_means(z);
    let mut cov = covariance(z, &mean);
    let ridge = ridge_for(&cov.diag());
    if kind == CovarianceKind::Diagonal {
        cov = Matrix::from_diag(&cov.diag());
    }
    cov.add_ridge(ridge);
    (cov, ridge)
}

pub fn fit_gmm(z: &Matrix, k: usize, rng: &mut Rng, config: &EmConfig) -> Result<GmmModel> {
    let (n, d) = (z.rows(), z.cols());
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument("K and d must be at least 1".into()));
    }
    if n < k {
        return Err(Error::TooFewSamples(format!("{n} samples for K = {k}")));
    }
    let kind = config.covariance;
    let (global_cov, ridge) = global_covariance(z, kind);
    let seeds = kmeans_pp_seeds(z, k, rng);

    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<Vec<f64>> = seeds.iter().map(|&i| z.row(i).to_vec()).collect();
    let mut covs = vec![global_cov.clone(); k];
    let mut history = Vec::new();
    let mut reseeds = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let required = min_mass(kind, d);

    loop {
        let (logp, norms) = weighted_log_densities(z, &weights, &means, &covs, kind)?;
        let ll: f64 = norms.iter().sum();
        if !ll.is_finite() {
            return Err(Error::DegenerateComponent {
                component: 0,
                mass: f64::NAN,
                required,
            });
        }
        if let Some(&prev) = history.last() {
            if ll - prev < config.tol * f64::abs(prev) && reseeds.last() != Some(&history.len()) {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        if iterations >= config.max_iter {
            break;
        }
        let gamma = responsibilities_from(logp, &norms);
        let step = m_step(z, &gamma, kind, ridge);
        let thin: Vec<usize> = (0..k).filter(|&c| step.masses[c] < required as f64).collect();
        weights = step.weights;
        means = step.means;
        covs = step.covariances;
        if !thin.is_empty() {
            if !reseeds.is_empty() {
                let c = thin[0];
                return Err(Error::DegenerateComponent {
                    component: c,
                    mass: step.masses[c],
                    required,
                });
            }
            // Reseed each thin component at the worst-explained points.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
            for (slot, &c) in thin.iter().enumerate() {
                means[c] = z.row(order[slot]).to_vec();
                covs[c] = global_cov.clone();
                weights[c] = 1.0 / k as f64;
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            reseeds.push(history.len());
        }
        iterations += 1;
    }

    let log_likelihood = *history.last().expect("at least one E-step");
    let mut model = GmmModel {
        k,
        covariance: kind,
        weights,
        means,
        covariances: covs,
        ridge,
        log_likelihood,
        bic: 0.0,
        iterations,
        converged,
        history,
        reseeds,
    };
    model.bic = bic(&model, n, d);
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct BicCandidate {
    pub k: usize,
    pub model: GmmModel,
    pub bic: f64,
    /// Restart index that produced the best log-likelihood.
    pub restart: usize,
}

#[derive(Debug, Clone)]
pub struct BicSweep {
    /// Sorted by K.
    pub candidates: Vec<BicCandidate>,
    /// K values for which every restart failed.
    pub failures: Vec<(usize, String)>,
    pub selected: usize,
}

impl BicSweep {
    pub fn selected_model(&self) -> &GmmModel {
        &self
            .candidates
            .iter()
            .find(|c| c.k == self.selected)
            .expect("selected K is a candidate")
            .model
    }
}

/// Fits every `K` in `k_range` with `restarts` seeded restarts each and keeps
/// the BIC minimizer (ties to the smaller K).
///
/// Restart `r` for `K` draws from `rng.child(&[K, r])`, so fits are
/// independent of evaluation order and may run in parallel.
pub fn select_k(
    z: &Matrix,
    k_range: std::ops::RangeInclusive<usize>,
    restarts: usize,
    rng: &Rng,
    config: &EmConfig,
) -> Result<BicSweep> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || lo > hi || hi > z.rows() {
        return Err(Error::InvalidArgument(format!(
            "K range {lo}..={hi} must lie within [1, {}]",
            z.rows()
        )));
    }
    let restarts = restarts.max(1);
    let jobs: Vec<(usize, usize)> = (lo..=hi)
        .flat_map(|k| (0..restarts).map(move |r| (k, r)))
        .collect();
    let fits: Vec<Result<GmmModel>> = jobs
        .par_iter()
        .map(|&(k, r)| {
            let mut stream = rng.child(&[k as u64, r as u64]);
            fit_gmm(z, k, &mut stream, config)
        })
        .collect();

    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    let mut last_error = None;
    for (chunk_idx, chunk) in fits.chunks(restarts).enumerate() {
        let k = lo + chunk_idx;
        let mut best: Option<(usize, &GmmModel)> = None;
        let mut err = None;
        for (r, fit) in chunk.iter().enumerate() {
            match fit {
                Ok(m) => {
                    if best.is_none_or(|(_, b)| m.log_likelihood > b.log_likelihood) {
                        best = Some((r, m));
                    }
                }
                Err(e) => err = Some(e.to_string()),
            }
        }
        match best {
            Some((restart, m)) => candidates.push(BicCandidate {
                k,
                bic: m.bic,
                model: m.clone(),
                restart,
            }),
            None => {
                let msg = err.unwrap_or_default();
                last_error = Some(msg.clone());
                failures.push((k, msg));
            }
        }
    }
    if candidates.is_empty() {
        // Re-run the first failing fit to surface a typed error.
        let mut stream = rng.child(&[lo as u64, 0]);
        fit_gmm(z, lo, &mut stream, config)?;
        return Err(Error::InvalidArgument(last_error.unwrap_or_default()));
    }
    let selected = candidates
        .iter()
        .fold(None::<&BicCandidate>, |acc, c| match acc {
            Some(a) if a.bic <= c.bic => Some(a),
            _ => Some(c),
        })
        .expect("non-empty")
        .k;
    Ok(BicSweep {
        candidates,
        failures,
        selected,
    })
}

/// Row-wise argmax, ties to the lowest component index.
pub fn hard_assign(gamma: &Matrix) -> Vec<usize> {
    gamma
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CohortAssignment {
    pub k_star: usize,
    pub responsibilities: Matrix,
    pub hard_labels: Vec<usize>,
    pub source_model: GmmModel,
}

impl CohortAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_star];
        for &c in &self.hard_labels {
            sizes[c] += 1;
        }
        sizes
    }
}

pub fn assign_with(z: &Matrix, model: &GmmModel) -> Result<CohortAssignment> {
    let gamma = e_step(z, model)?;
    Ok(CohortAssignment {
        k_star: model.k,
        hard_labels: hard_assign(&gamma),
        responsibilities: gamma,
        source_model: model.clone(),
    })
}

pub fn assign_cohorts(z: &Matrix, sweep: &BicSweep) -> Result<CohortAssignment> {
    assign_with(z, sweep.selected_model())
}

/// Per-dimension z-score statistics; zero-variance dimensions keep scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(z: &Matrix) -> Self {
        let mean = column_means(z);
        let mut var = vec![0.0; z.cols()];
        for row in z.iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let n = z.rows().max(1) as f64;
        let scale = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, z: &Matrix) -> Matrix {
        let mut out = z.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }
}

/// PCA whitening keeping the leading components that explain `variance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaWhitening {
    pub mean: Vec<f64>,
    /// `d × r`, one principal axis per column, pre-divided by `sqrt(λ)`.
    pub projection: Vec<Vec<f64>>,
    pub explained: f64,
}

impl PcaWhitening {
    pub fn fit(z: &Matrix, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "PCA variance fraction {variance} must be in (0, 1]"
            )));
        }
        let mean = column_means(z);
        let cov = covariance(z, &mean);
        let (vals, vecs) = symmetric_eigen(&cov)?;
        let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
        let mut keep = 0;
        let mut acc = 0.0;
        while keep < vals.len() && vals[keep] > 0.0 {
            acc += vals[keep];
            keep += 1;
            if total <= 0.0 || acc / total >= variance - 1e-12 {
                break;
            }
        }
        let keep = keep.max(1);
        let projection = (0..z.cols())
            .map(|row| {
                (0..keep)
                    .map(|c| vecs[(row, c)] / vals[c].max(f64::MIN_POSITIVE).sqrt())
                    .collect()
            })
            .collect();
        Ok(PcaWhitening {
            mean,
            projection,
            explained: if total > 0.0 { acc / total } else { 1.0 },
        })
    }

    pub fn output_dim(&self) -> usize {
        self.projection.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn apply(&self, z: &Matrix) -> Matrix {
        let r = self.output_dim();
        let mut out = Matrix::zeros(z.rows(), r);
        for i in 0..z.rows() {
            let row = z.row(i);
            for (j, x) in row.iter().enumerate() {
                let c = x - self.mean[j];
                for (o, p) in out.row_mut(i).iter_mut().zip(&self.projection[j]) {
                    *o += c * p;
                }
            }
        }
        out
    }
}

/// Standardized embeddings concatenated with `weight`-scaled one-hot
/// encodings of `attr_names`. Standardization statistics come from the
/// training split when the dataset is split, otherwise from all records.
pub fn dac_augment(
    ds: &EmbeddingDataset,
    attr_names: &[impl AsRef<str>],
    weight: f64,
) -> Result<Matrix> {
    let mut schemas = Vec::new();
    for n in attr_names {
        schemas.push(
            ds.attribute(n.as_ref())
                .ok_or_else(|| Error::UnknownAttribute(n.as_ref().to_string()))?,
        );
    }
    for r in &ds.records {
        for s in &schemas {
            if !r.attrs.contains_key(&s.name) {
                return Err(Error::MissingAttribute {
                    record: r.id.clone(),
                    attribute: s.name.clone(),
                });
            }
        }
    }
    let all = ds.embeddings();
    let fit_on = if ds.has_splits() {
        ds.embeddings_of(&ds.indices(Split::Train))
    } else {
        all.clone()
    };
    let std = Standardizer::fit(&fit_on).apply(&all);
    let m: usize = schemas.iter().map(|s| s.cardinality()).sum();
    let mut out = Matrix::zeros(ds.len(), ds.d + m);
    for (i, r) in ds.records.iter().enumerate() {
        let row = out.row_mut(i);
        row[..ds.d].copy_from_slice(std.row(i));
        let mut offset = ds.d;
        for s in &schemas {
            row[offset + r.attrs[&s.name]] = weight;
            offset += s.cardinality();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacConfig {
    pub attributes: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub restarts: usize,
    pub seed: u64,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub pca: Option<f64>,
    #[serde(default)]
    pub dac: Option<DacConfig>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k_min: 1,
            k_max: 12,
            restarts: 5,
            seed: 0,
            em: EmConfig::default(),
            standardize: false,
            pca: None,
            dac: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub k: usize,
    pub bic: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub free_parameters: usize,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub covariance: CovarianceKind,
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<Vec<f64>>>,
    pub ridge: f64,
}

impl MixtureParams {
    pub fn from_model(m: &GmmModel) -> Self {
        MixtureParams {
            covariance: m.covariance,
            pi: m.weights.clone(),
            mu: m.means.clone(),
            sigma: m.covariances.iter().map(|s| s.to_rows()).collect(),
            ridge: m.ridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub standardize: Option<Standardizer>,
    pub pca: Option<PcaWhitening>,
    pub dac: Option<DacConfig>,
}

/// On-disk cohort assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFile {
    pub format: String,
    #[serde(rename = "K_star")]
    pub k_star: usize,
    pub bic_table: Vec<BicRow>,
    /// Record id → hidden cohort. Training records come from the fitted
    /// posterior; val/test records are assigned by the same posterior.
    pub hard_labels: BTreeMap<String, usize>,
    pub model: MixtureParams,
    pub preprocessing: Preprocessing,
    pub fit_split: String,
    pub config: ClusterConfig,
}

pub const COHORT_FORMAT: &str = "lhcf-cohorts/1";

impl CohortFile {
    pub fn cohort_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_star];
        for &c in self.hard_labels.values() {
            sizes[c] += 1;
        }
        sizes
    }
}

impl From<&CohortFile> for GroupLabels {
    fn from(c: &CohortFile) -> Self {
        GroupLabels {
            names: (0..c.k_star).map(|k| format!("cohort{k}")).collect(),
            by_id: c.hard_labels.clone(),
        }
    }
}

/// Clustering input for every record after the configured preprocessing,
/// with transforms fitted on the training rows.
fn clustering_input(ds: &EmbeddingDataset, cfg: &ClusterConfig) -> Result<(Matrix, Preprocessing)> {
    let train = ds.indices(Split::Train);
    let mut z = match &cfg.dac {
        Some(dac) => dac_augment(ds, &dac.attributes, dac.weight)?,
        None => ds.embeddings(),
    };
    let mut pre = Preprocessing {
        standardize: None,
        pca: None,
        dac: cfg.dac.clone(),
    };
    if cfg.standardize && cfg.dac.is_none() {
        let s = Standardizer::fit(&z.select_rows(&train));
        z = s.apply(&z);
        pre.standardize = Some(s);
    }
    if let Some(v) = cfg.pca {
        let p = PcaWhitening::fit(&z.select_rows(&train), v)?;
        z = p.apply(&z);
        pre.pca = Some(p);
    }
    Ok((z, pre))
}

/// Fits the BIC sweep on the training split and labels every record.
pub fn cluster_dataset(ds: &EmbeddingDataset, cfg: &ClusterConfig) -> Result<(CohortFile, BicSweep)> {
    ds.require_splits()?;
    let (z, preprocessing) = clustering_input(ds, cfg)?;
    let train = ds.indices(Split::Train);
    let z_train = z.select_rows(&train);
    let k_max = cfg.k_max.min(z_train.rows());
    let sweep = select_k(
        &z_train,
        cfg.k_min..=k_max,
        cfg.restarts,
        &Rng::new(cfg.seed),
        &cfg.em,
    )?;
    let assignment = assign_with(&z, sweep.selected_model())?;
    let hard_labels = ds
        .records
        .iter()
        .zip(&assignment.hard_labels)
        .map(|(r, &c)| (r.id.clone(), c))
        .collect();
    let d = z.cols();
    let mut bic_table: Vec<BicRow> = sweep
        .candidates
        .iter()
        .map(|c| BicRow {
            k: c.k,
            bic: Some(c.bic),
            log_likelihood: Some(c.model.log_likelihood),
            free_parameters: c.model.free_parameters(),
            iterations: Some(c.model.iterations),
            converged: Some(c.model.converged),
            error: None,
        })
        .collect();
    for (k, e) in &sweep.failures {
        bic_table.push(BicRow {
            k: *k,
            bic: None,
            log_likelihood: None,
            free_parameters: free_parameters(*k, d, cfg.em.covariance),
            iterations: None,
            converged: None,
            error: Some(e.clone()),
        });
    }
    bic_table.sort_by_key(|r| r.k);
    let file = CohortFile {
        format: COHORT_FORMAT.into(),
        k_star: sweep.selected,
        bic_table,
        hard_labels,
        model: MixtureParams::from_model(sweep.selected_model()),
        preprocessing,
        fit_split: Split::Train.as_str().into(),
        config: cfg.clone(),
    };
    Ok((file, sweep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_1d(weights: &[f64], means: &[f64], var: f64) -> GmmModel {
        GmmModel {
            k: weights.len(),
            covariance: CovarianceKind::Full,
            weights: weights.to_vec(),
            means: means.iter().map(|&m| vec![m]).collect(),
            covariances: vec![Matrix::from_rows(&[[var]]).unwrap(); weights.len()],
            ridge: 0.0,
            log_likelihood: 0.0,
            bic: 0.0,
            iterations: 0,
            converged: true,
            history: vec![],
            reseeds: vec![],
        }
    }

    #[test]
    fn free_parameter_counts() {
        assert_eq!(free_parameters(1, 1, CovarianceKind::Full), 2);
        assert_eq!(free_parameters(7, 16, CovarianceKind::Full), 1070);
        assert_eq!(free_parameters(2, 2, CovarianceKind::Full), 11);
        assert_eq!(free_parameters(3, 4, CovarianceKind::Diagonal), 26);
    }

    #[test]
    fn bic_examples() {
        let mut m = model_1d(&[1.0], &[0.0], 1.0);
        m.log_likelihood = -42.0;
        assert!((bic(&m, 50, 1) - (2.0 * 50f64.ln() + 84.0)).abs() < 1e-12);
        let mut m2 = GmmModel {
            means: vec![vec![0.0, 0.0]; 2],
            ..model_1d(&[0.5, 0.5], &[0.0, 0.0], 1.0)
        };
        m2.log_likelihood = -350.0;
        assert!((bic(&m2, 100, 2) - (11.0 * 100f64.ln() + 700.0)).abs() < 1e-12);
    }

    #[test]
    fn e_step_examples() {
        let z = Matrix::from_rows(&[[0.3], [-2.0]]).unwrap();
        let g = e_step(&z, &model_1d(&[1.0], &[0.0], 1.0)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 1.0));

        let z = Matrix::from_rows(&[[0.0]]).unwrap();
        let g = e_step(&z, &model_1d(&[0.5, 0.5], &[-1.0, 1.0], 1.0)).unwrap();
        assert!((g[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(g[(0, 0)], g[(0, 1)]);

        let g = e_step(&z, &model_1d(&[0.9, 0.1], &[-1.0, 1.0], 1.0)).unwrap();
        assert!((g[(0, 0)] - 0.9).abs() < 1e-12 && (g[(0, 1)] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn hard_assignment_rules() {
        let g = Matrix::from_rows(&[[0.1, 0.7, 0.2], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(hard_assign(&g), vec![1, 0, 2]);
    }

    #[test]
    fn point_mass_single_component() {
        let z = Matrix::from_rows(&[[1.5, -2.0]; 10]).unwrap();
        let m = fit_gmm(&z, 1, &mut Rng::new(0), &EmConfig::default()).unwrap();
        assert_eq!(m.means[0], vec![1.5, -2.0]);
        assert!(m.log_likelihood.is_finite());
        assert!((m.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_component_is_moment_matching() {
        let mut rng = Rng::new(5);
        let rows: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                let a = rng.normal();
                [a, 0.5 * a + rng.normal(), 2.0 + 0.1 * rng.normal()]
            })
            .collect();
        let z = Matrix::from_rows(&rows).unwrap();
        let m = fit_gmm(&z, 1, &mut Rng::new(1), &EmConfig::default()).unwrap();
        let mean = column_means(&z);
        let mut cov = covariance(&z, &mean);
        cov.add_ridge(m.ridge);
        for (a, b) in m.means[0].iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(m.covariances[0].max_abs_diff(&cov) < 1e-12);
        assert!(m.converged);
    }

    #[test]
    fn weights_equal_mean_responsibility() {
        let mut rng = Rng::new(9);
        let rows: Vec<[f64; 2]> = (0..300)
            .map(|i| {
                let c = if i % 3 == 0 { 4.0 } else { -4.0 };
                [c + rng.normal(), rng.normal()]
            })
            .collect();
        let z = Matrix::from_rows(&rows).unwrap();
        let m = fit_gmm(&z, 2, &mut Rng::new(2), &EmConfig::default()).unwrap();
        let g = e_step(&z, &m).unwrap();
        let step = m_step(&z, &g, CovarianceKind::Full, m.ridge);
        for c in 0..2 {
            let mut s = 0.0;
            for i in 0..z.rows() {
                s += g[(i, c)];
            }
            assert_eq!(step.weights[c], s / z.rows() as f64);
        }
        assert!((step.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recovers_separated_1d_means() {
        let mut rng = Rng::new(3);
        let mut rows = Vec::new();
        let mut truth = [(0.0, 0usize); 2];
        for i in 0..1000 {
            let c = i % 2;
            let v = if c == 0 { -5.0 } else { 5.0 } + rng.normal();
            truth[c].0 += v;
            truth[c].1 += 1;
            rows.push([v]);
        }
        let z = Matrix::from_rows(&rows).unwrap();
        let m = fit_gmm(&z, 2, &mut Rng::new(4), &EmConfig::default()).unwrap();
        let mut got: Vec<f64> = m.means.iter().map(|v| v[0]).collect();
        got.sort_by(f64::total_cmp);
        let oracle = [truth[0].0 / truth[0].1 as f64, truth[1].0 / truth[1].1 as f64];
        assert!((got[0] - oracle[0]).abs() < 0.2 && (got[1] - oracle[1]).abs() < 0.2);
        assert!((got[0] + 5.0).abs() < 0.2 && (got[1] - 5.0).abs() < 0.2);
        for w in m.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn diagonal_mode_fits() {
        let mut rng = Rng::new(8);
        let rows: Vec<[f64; 4]> = (0..400)
            .map(|i| {
                let s = if i % 2 == 0 { 3.0 } else { -3.0 };
                [s + rng.normal(), rng.normal(), s + rng.normal(), rng.normal()]
            })
            .collect();
        let z = Matrix::from_rows(&rows).unwrap();
        let cfg = EmConfig {
            covariance: CovarianceKind::Diagonal,
            ..EmConfig::default()
        };
        let sweep = select_k(&z, 1..=4, 3, &Rng::new(1), &cfg).unwrap();
        assert_eq!(sweep.selected, 2);
        let m = sweep.selected_model();
        assert_eq!(m.free_parameters(), 1 + 2 * 2 * 4);
        for c in &m.covariances {
            assert_eq!(c[(0, 1)], 0.0);
        }
    }

    #[test]
    fn too_few_samples() {
        let z = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(fit_gmm(&z, 3, &mut Rng::new(0), &EmConfig::default()).is_err());
        assert!(select_k(&z, 1..=3, 1, &Rng::new(0), &EmConfig::default()).is_err());
    }

    #[test]
    fn pca_whitening_decorrelates() {
        let mut rng = Rng::new(12);
        let rows: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                let a = 3.0 * rng.normal();
                [a, a + 0.01 * rng.normal(), rng.normal()]
            })
            .collect();
        let z = Matrix::from_rows(&rows).unwrap();
        let p = PcaWhitening::fit(&z, 0.95).unwrap();
        assert_eq!(p.output_dim(), 2);
        let w = p.apply(&z);
        let cov = covariance(&w, &column_means(&w));
        assert!(cov.max_abs_diff(&Matrix::identity(2)) < 1e-8);
    }
}
