//! Embedding datasets: TSV + JSON manifest storage, stratified splits and
//! visible (demographic) partitions.
//!
//! The embedding file is UTF-8 TSV with header
//! `id<TAB>y<TAB><attr1>...<TAB>z0...z{d-1}`. Attribute cells hold the
//! category index, or are empty when the value is missing. The manifest is a
//! JSON sidecar naming the TSV (relative to the manifest's directory), the
//! dimension, the attribute schema and an optional split map.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{largest_remainder, Matrix, Rng};

pub const MANIFEST_FORMAT: &str = "lhcf-embeddings/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub kind: AttributeKind,
    pub values: Vec<String>,
    /// Hidden attributes (ground truth from the generator) are never used as
    /// visible partitions by default.
    #[serde(default = "default_true")]
    pub visible: bool,
}

fn default_true() -> bool {
    true
}

impl AttributeSchema {
    pub fn categorical(name: impl Into<String>, values: &[&str]) -> Self {
        AttributeSchema {
            name: name.into(),
            kind: AttributeKind::Categorical,
            values: values.iter().map(|v| v.to_string()).collect(),
            visible: true,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::SchemaViolation(format!(
                "attribute `{}` needs at least 2 values",
                self.name
            )));
        }
        let unique: BTreeSet<&String> = self.values.iter().collect();
        if unique.len() != self.values.len() {
            return Err(Error::SchemaViolation(format!(
                "attribute `{}` has duplicate value names",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub z: Vec<f64>,
    pub y: u8,
    pub attrs: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub d: usize,
    pub schema: Vec<AttributeSchema>,
    pub records: Vec<SampleRecord>,
    pub splits: BTreeMap<String, Split>,
}

impl EmbeddingDataset {
    pub fn new(d: usize, schema: Vec<AttributeSchema>, records: Vec<SampleRecord>) -> Result<Self> {
        let ds = EmbeddingDataset {
            d,
            schema,
            records,
            splits: BTreeMap::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for a in &self.schema {
            a.validate()?;
            if !names.insert(a.name.as_str()) {
                return Err(Error::SchemaViolation(format!(
                    "duplicate attribute `{}`",
                    a.name
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::SchemaViolation(format!("duplicate id `{}`", r.id)));
            }
            if r.z.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: r.z.len(),
                    context: Some(format!("record `{}`", r.id)),
                });
            }
            if r.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::SchemaViolation(format!(
                    "record `{}` has a non-finite embedding value",
                    r.id
                )));
            }
            if r.y > 1 {
                return Err(Error::SchemaViolation(format!(
                    "record `{}` label {} not in {{0,1}}",
                    r.id, r.y
                )));
            }
            for (k, &v) in &r.attrs {
                let schema = self.attribute(k).ok_or_else(|| {
                    Error::SchemaViolation(format!("record `{}` uses undeclared attribute `{k}`", r.id))
                })?;
                if v >= schema.cardinality() {
                    return Err(Error::SchemaViolation(format!(
                        "record `{}` attribute `{k}` index {v} >= cardinality {}",
                        r.id,
                        schema.cardinality()
                    )));
                }
            }
        }
        if !self.splits.is_empty() {
            if self.splits.len() != self.records.len()
                || self.records.iter().any(|r| !self.splits.contains_key(&r.id))
            {
                return Err(Error::SchemaViolation(
                    "split map must cover every record exactly once".into(),
                ));
            }
            for s in Split::ALL {
                if !self.splits.values().any(|&v| v == s) {
                    return Err(Error::SchemaViolation(format!("{} split is empty", s.as_str())));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSchema> {
        self.schema.iter().find(|a| a.name == name)
    }

    pub fn visible_attributes(&self) -> Vec<&AttributeSchema> {
        self.schema.iter().filter(|a| a.visible).collect()
    }

    pub fn has_splits(&self) -> bool {
        !self.splits.is_empty()
    }

    pub fn require_splits(&self) -> Result<()> {
        if self.has_splits() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "dataset has no train/val/test split; run `lhcf split` first".into(),
            ))
        }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    /// Record indices belonging to `split`, in record order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.splits.get(&r.id) == Some(&split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn embeddings(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.records.len() * self.d);
        for r in &self.records {
            data.extend_from_slice(&r.z);
        }
        Matrix::from_vec(self.records.len(), self.d, data).expect("validated dimensions")
    }

    pub fn embeddings_of(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(&self.records[i].z);
        }
        Matrix::from_vec(idx.len(), self.d, data).expect("validated dimensions")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.records[i].y).collect()
    }

    pub fn index_by_id(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    format: String,
    d: usize,
    embeddings: PathBuf,
    schema: Vec<AttributeSchema>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    splits: BTreeMap<String, Split>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<EmbeddingDataset> {
    let manifest: ManifestFile = io::read_json(manifest_path)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(parse_err(
            manifest_path,
            1,
            format!("unsupported manifest format `{}`", manifest.format),
        ));
    }
    let tsv_path = resolve_relative(manifest_path, &manifest.embeddings);
    let text = io::read_to_string(&tsv_path)?;
    let records = parse_tsv(&tsv_path, &text, manifest.d, &manifest.schema)?;
    for a in &manifest.schema {
        a.validate()?;
    }
    let ds = EmbeddingDataset {
        d: manifest.d,
        schema: manifest.schema,
        records,
        splits: manifest.splits,
    };
    ds.validate()?;
    Ok(ds)
}

fn resolve_relative(manifest_path: &Path, target: &Path) -> PathBuf {
    if target.is_absolute() {
        return target.to_path_buf();
    }
    match manifest_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.join(target),
        _ => target.to_path_buf(),
    }
}

fn parse_tsv(
    path: &Path,
    text: &str,
    d: usize,
    schema: &[AttributeSchema],
) -> Result<Vec<SampleRecord>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header row"))?;
    let mut expected = vec!["id".to_string(), "y".to_string()];
    expected.extend(schema.iter().map(|a| a.name.clone()));
    expected.extend((0..d).map(|j| format!("z{j}")));
    let got: Vec<&str> = header.split('\t').collect();
    if got.len() != expected.len() {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: got.len().saturating_sub(2 + schema.len()),
            context: Some(format!("{}:1 header columns", path.display())),
        });
    }
    for (g, e) in got.iter().zip(&expected) {
        if g != e {
            return Err(parse_err(
                path,
                1,
                format!("header column `{g}` where `{e}` was expected"),
            ));
        }
    }

    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let fixed = 2 + schema.len();
        if fields.len() < fixed || fields.len() - fixed != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: fields.len().saturating_sub(fixed),
                context: Some(format!("{}:{lineno}", path.display())),
            });
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(parse_err(path, lineno, "empty id"));
        }
        let y = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(path, lineno, format!("label `{other}` is not 0 or 1"))),
        };
        let mut attrs = BTreeMap::new();
        for (a, cell) in schema.iter().zip(&fields[2..fixed]) {
            if cell.is_empty() {
                continue;
            }
            let v: usize = cell.parse().map_err(|_| {
                parse_err(path, lineno, format!("attribute `{}` value `{cell}` is not an index", a.name))
            })?;
            if v >= a.cardinality() {
                return Err(Error::SchemaViolation(format!(
                    "{}:{lineno}: attribute `{}` index {v} >= cardinality {}",
                    path.display(),
                    a.name,
                    a.cardinality()
                )));
            }
            attrs.insert(a.name.clone(), v);
        }
        let mut z = Vec::with_capacity(d);
        for cell in &fields[fixed..] {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("embedding value `{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, "non-finite embedding value"));
            }
            z.push(v);
        }
        records.push(SampleRecord { id, z, y, attrs });
    }
    Ok(records)
}

pub fn to_tsv(ds: &EmbeddingDataset) -> String {
    let mut out = String::new();
    out.push_str("id\ty");
    for a in &ds.schema {
        out.push('\t');
        out.push_str(&a.name);
    }
    for j in 0..ds.d {
        let _ = write!(out, "\tz{j}");
    }
    out.push('\n');
    for r in &ds.records {
        out.push_str(&r.id);
        let _ = write!(out, "\t{}", r.y);
        for a in &ds.schema {
            out.push('\t');
            if let Some(v) = r.attrs.get(&a.name) {
                let _ = write!(out, "{v}");
            }
        }
        for v in &r.z {
            // `{}` on f64 prints the shortest string that parses back exactly.
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes `tsv_path` and a manifest referencing it.
pub fn save_dataset(ds: &EmbeddingDataset, manifest_path: &Path, tsv_path: &Path) -> Result<()> {
    ds.validate()?;
    io::write_atomic(tsv_path, to_tsv(ds).as_bytes())?;
    save_manifest(ds, manifest_path, tsv_path)
}

/// Rewrites only the manifest (e.g. after new splits); the TSV is untouched.
pub fn save_manifest(ds: &EmbeddingDataset, manifest_path: &Path, tsv_path: &Path) -> Result<()> {
    let manifest = ManifestFile {
        format: MANIFEST_FORMAT.into(),
        d: ds.d,
        embeddings: relative_to_manifest(manifest_path, tsv_path),
        schema: ds.schema.clone(),
        splits: ds.splits.clone(),
    };
    io::write_json(manifest_path, &manifest)
}

/// Path of the TSV referenced by a manifest on disk.
pub fn manifest_embeddings_path(manifest_path: &Path) -> Result<PathBuf> {
    let manifest: ManifestFile = io::read_json(manifest_path)?;
    Ok(resolve_relative(manifest_path, &manifest.embeddings))
}

fn relative_to_manifest(manifest_path: &Path, tsv_path: &Path) -> PathBuf {
    let mdir = manifest_path.parent().unwrap_or(Path::new(""));
    let tdir = tsv_path.parent().unwrap_or(Path::new(""));
    if mdir == tdir {
        if let Some(name) = tsv_path.file_name() {
            return PathBuf::from(name);
        }
    }
    if let Ok(rel) = tsv_path.strip_prefix(mdir) {
        if !mdir.as_os_str().is_empty() {
            return rel.to_path_buf();
        }
    }
    std::path::absolute(tsv_path).unwrap_or_else(|_| tsv_path.to_path_buf())
}

/// Label-stratified train/val/test split using largest-remainder counts.
pub fn make_splits(
    ds: &EmbeddingDataset,
    fractions: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<EmbeddingDataset> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {f:?} must be positive and sum to 1"
        )));
    }
    let class_sizes = [0u8, 1u8].map(|c| ds.records.iter().filter(|r| r.y == c).count());
    let allocation = stratified_counts(&class_sizes, &f);
    let mut splits = BTreeMap::new();
    for class in [0u8, 1u8] {
        let mut members: Vec<usize> = ds
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.y == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < f.len() {
            return Err(Error::TooFewSamples(format!(
                "class {class} has {} samples, fewer than 3 split parts",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let counts = &allocation[class as usize];
        let mut cursor = 0;
        for (split, &count) in Split::ALL.iter().zip(counts) {
            for &i in &members[cursor..cursor + count] {
                splits.insert(ds.records[i].id.clone(), *split);
            }
            cursor += count;
        }
    }
    for s in Split::ALL {
        if !splits.values().any(|&v| v == s) {
            return Err(Error::TooFewSamples(format!("{} split would be empty", s.as_str())));
        }
    }
    let mut out = ds.clone();
    out.splits = splits;
    Ok(out)
}

/// Per-class largest-remainder counts. Leftover seats whose remainders tie
/// go to the split furthest below its overall target, so small splits do not
/// end up empty when every class rounds the same way.
fn stratified_counts(class_sizes: &[usize], fractions: &[f64]) -> Vec<Vec<usize>> {
    let total: usize = class_sizes.iter().sum();
    let target = largest_remainder(total, fractions);
    let mut assigned = vec![0usize; fractions.len()];
    let mut out = Vec::with_capacity(class_sizes.len());
    for &n in class_sizes {
        let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
        let rem: Vec<f64> = quotas
            .iter()
            .zip(&counts)
            .map(|(q, &c)| (q - c as f64).max(0.0))
            .collect();
        let leftover = n.saturating_sub(counts.iter().sum());
        for _ in 0..leftover {
            let deficit = |s: usize| {
                let t = target[s] as f64;
                if t > 0.0 {
                    (t - (assigned[s] + counts[s]) as f64) / t
                } else {
                    f64::NEG_INFINITY
                }
            };
            let mut best: Option<usize> = None;
            for s in 0..fractions.len() {
                if counts[s] as f64 >= quotas[s].ceil() {
                    continue;
                }
                best = match best {
                    None => Some(s),
                    Some(b) if rem[s] > rem[b] + 1e-9 => Some(s),
                    Some(b) if (rem[s] - rem[b]).abs() <= 1e-9 && deficit(s) > deficit(b) => Some(s),
                    keep => keep,
                };
            }
            counts[best.unwrap_or(0)] += 1;
        }
        for (a, c) in assigned.iter_mut().zip(&counts) {
            *a += c;
        }
        out.push(counts);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleGroup {
    /// Category name per constituent attribute.
    pub label: Vec<String>,
    pub ids: BTreeSet<String>,
}

impl VisibleGroup {
    pub fn display_label(&self) -> String {
        self.label.join("|")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleCohortPartition {
    pub name: String,
    pub attributes: Vec<String>,
    pub groups: Vec<VisibleGroup>,
}

impl VisibleCohortPartition {
    pub fn group_of(&self, id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.ids.contains(id))
    }
}

pub fn partition_name(attrs: &[impl AsRef<str>]) -> String {
    attrs.iter().map(|a| a.as_ref()).collect::<Vec<_>>().join("*")
}

/// Cartesian-product partition over the named attributes; empty cells dropped.
pub fn intersect_attributes(
    ds: &EmbeddingDataset,
    attr_names: &[impl AsRef<str>],
) -> Result<VisibleCohortPartition> {
    if attr_names.is_empty() {
        return Err(Error::InvalidArgument("no attributes named".into()));
    }
    let mut schemas = Vec::new();
    for n in attr_names {
        let s = ds
            .attribute(n.as_ref())
            .ok_or_else(|| Error::UnknownAttribute(n.as_ref().to_string()))?;
        schemas.push(s);
    }
    let mut cells: BTreeMap<Vec<usize>, BTreeSet<String>> = BTreeMap::new();
    for r in &ds.records {
        let key: Option<Vec<usize>> = schemas.iter().map(|s| r.attrs.get(&s.name).copied()).collect();
        if let Some(key) = key {
            cells.entry(key).or_default().insert(r.id.clone());
        }
    }
    let groups = cells
        .into_iter()
        .map(|(key, ids)| VisibleGroup {
            label: key
                .iter()
                .zip(&schemas)
                .map(|(&v, s)| s.values[v].clone())
                .collect(),
            ids,
        })
        .collect();
    Ok(VisibleCohortPartition {
        name: partition_name(attr_names),
        attributes: attr_names.iter().map(|a| a.as_ref().to_string()).collect(),
        groups,
    })
}

/// Group membership by record id, independent of where the groups came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLabels {
    pub names: Vec<String>,
    pub by_id: BTreeMap<String, usize>,
}

impl GroupLabels {
    pub fn num_groups(&self) -> usize {
        self.names.len()
    }

    pub fn of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Group index per record index; errors on the first record lacking one.
    pub fn align(&self, ds: &EmbeddingDataset, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                let id = &ds.records[i].id;
                self.of(id).ok_or_else(|| Error::UnknownRecord(id.clone()))
            })
            .collect()
    }

    /// First id in `ds` without a group, if any.
    pub fn first_missing<'a>(&self, ds: &'a EmbeddingDataset) -> Option<&'a str> {
        ds.records
            .iter()
            .map(|r| r.id.as_str())
            .find(|id| !self.by_id.contains_key(*id))
    }
}

impl From<&VisibleCohortPartition> for GroupLabels {
    fn from(p: &VisibleCohortPartition) -> Self {
        let mut by_id = BTreeMap::new();
        for (g, group) in p.groups.iter().enumerate() {
            for id in &group.ids {
                by_id.insert(id.clone(), g);
            }
        }
        GroupLabels {
            names: p.groups.iter().map(|g| g.display_label()).collect(),
            by_id,
        }
    }
}
