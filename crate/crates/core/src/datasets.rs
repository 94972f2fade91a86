//! Labelled datasets: synthetic blobs on the unit sphere, CSV I/O and the
//! base/novel split.
//!
//! CSV layout: one example per line, first column an integer label, then the
//! feature values. Lines starting with `#` are directives:
//!
//! - `# dims: H W` marks the features as a flattened `H × W` grid
//! - `# category: ID NAME` declares a registry entry; once any is present,
//!   labels outside the registry are rejected
//! - `# split: train|val|test` tags every following row (default `train`)

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    grid: Option<(usize, usize)>,
    features: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    registry: BTreeMap<usize, String>,
}

impl LabeledDataset {
    pub fn new(
        dim: usize,
        grid: Option<(usize, usize)>,
        features: Vec<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        registry: BTreeMap<usize, String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("dataset dimension must be positive".into()));
        }
        if let Some((h, w)) = grid {
            if h * w != dim {
                return Err(Error::Contract(format!("grid {h}x{w} does not match dimension {dim}")));
            }
        }
        if features.len() != labels.len() * dim || splits.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature values, {} labels and {} split tags are inconsistent for dimension {dim}",
                features.len(),
                labels.len(),
                splits.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| !registry.contains_key(l)) {
            return Err(Error::Contract(format!("label {l} missing from the category registry")));
        }
        Ok(Self {
            dim,
            grid,
            features,
            labels,
            splits,
            registry,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn registry(&self) -> &BTreeMap<usize, String> {
        &self.registry
    }

    /// Category ids in registry order.
    pub fn categories(&self) -> Vec<usize> {
        self.registry.keys().copied().collect()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Row indices per label, restricted to `split` when given.
    pub fn indices_by_label(&self, split: Option<Split>) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = self.registry.keys().map(|k| (*k, Vec::new())).collect();
        for i in 0..self.len() {
            if split.is_none_or(|s| self.splits[i] == s) {
                out.entry(self.labels[i]).or_default().push(i);
            }
        }
        out
    }

    /// Stacks the given rows into an `[n × dim]` tensor.
    pub fn tensor(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Contract(format!("example {i} out of range for {} examples", self.len())));
            }
            data.extend_from_slice(self.example(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data)
    }

    /// Keeps only the rows of one split.
    pub fn subset(&self, split: Split) -> Self {
        self.select(&self.indices_in(split))
    }

    fn select(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.example(i));
        }
        Self {
            dim: self.dim,
            grid: self.grid,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            registry: self.registry.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub n_categories: usize,
    pub dim: usize,
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub test_per_category: usize,
    /// Upper bound on the pairwise cosine between class means.
    pub max_cosine: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n_categories: 20,
            dim: 16,
            train_per_category: 500,
            val_per_category: 100,
            test_per_category: 100,
            max_cosine: 0.3,
            noise_sigma: 0.1,
            seed: 17,
        }
    }
}

/// Attempts per class mean before the bound is declared infeasible.
const REJECTION_BUDGET: usize = 20_000;

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Class means on the unit sphere with every pairwise cosine at most `bound`.
pub fn class_means(n: usize, dim: usize, bound: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if bound <= 0.0 && n <= dim && bound > -1e-12 {
        // Gram-Schmidt on random directions gives an orthonormal set
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
        while out.len() < n {
            let mut v = random_unit(dim, rng);
            for u in &out {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let nv = norm(&v);
            if nv > 1e-6 {
                out.push(v.into_iter().map(|x| x / nv).collect());
            }
        }
        return Ok(out);
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for c in 0..n {
        let mut placed = false;
        for _ in 0..REJECTION_BUDGET {
            let v = random_unit(dim, rng);
            if out.iter().all(|u| dot(u, &v) <= bound) {
                out.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place class mean {c} of {n} with pairwise cosine <= {bound} in {dim} dimensions; try a larger dim or a looser bound"
            )));
        }
    }
    Ok(out)
}

fn check_blob_spec(spec: &BlobSpec) -> Result<()> {
    if spec.n_categories == 0 || spec.dim == 0 {
        return Err(Error::Config("blobs need at least one category and dimension".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config(format!("noise_sigma must be nonnegative, got {}", spec.noise_sigma)));
    }
    Ok(())
}

/// The unit class means [`generate_blobs`] draws for `spec`.
pub fn blob_means(spec: &BlobSpec) -> Result<Vec<Vec<f64>>> {
    check_blob_spec(spec)?;
    class_means(spec.n_categories, spec.dim, spec.max_cosine, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

/// Largest pairwise cosine among unit vectors.
pub fn max_pairwise_cosine(units: &[Vec<f64>]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let c = dot(&units[i], &units[j]);
            best = Some(best.map_or(c, |x: f64| x.max(c)));
        }
    }
    best
}

/// Gaussian blobs around well-separated unit class means.
///
/// Rows are ordered by split (train, val, test), then category.
pub fn generate_blobs(spec: &BlobSpec) -> Result<LabeledDataset> {
    check_blob_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec.n_categories, spec.dim, spec.max_cosine, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (split, count) in [
        (Split::Train, spec.train_per_category),
        (Split::Val, spec.val_per_category),
        (Split::Test, spec.test_per_category),
    ] {
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..count {
                if spec.noise_sigma == 0.0 {
                    features.extend_from_slice(mean);
                } else {
                    features.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
                }
                labels.push(c);
                splits.push(split);
            }
        }
    }
    let registry = (0..spec.n_categories).map(|c| (c, format!("blob{c}"))).collect();
    LabeledDataset::new(spec.dim, None, features, labels, splits, registry)
}

/// Largest pairwise cosine between per-category means of the given split.
pub fn measured_mean_separation(ds: &LabeledDataset, split: Option<Split>) -> Option<f64> {
    let means: Vec<Vec<f64>> = ds
        .indices_by_label(split)
        .values()
        .filter(|rows| !rows.is_empty())
        .map(|rows| {
            let mut m = vec![0.0; ds.dim()];
            for &i in rows {
                m.iter_mut().zip(ds.example(i)).for_each(|(a, v)| *a += v);
            }
            m
        })
        .collect();
    let mut best: Option<f64> = None;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let (a, b) = (norm(&means[i]), norm(&means[j]));
            if a > 0.0 && b > 0.0 {
                let c = dot(&means[i], &means[j]) / (a * b);
                best = Some(best.map_or(c, |x: f64| x.max(c)));
            }
        }
    }
    best
}

/// Splits into a base view and a novel pool with labels relabelled densely in
/// ascending id order. The pool's rows are all tagged `train`.
pub fn split_base_novel(
    ds: &LabeledDataset,
    base_ids: &[usize],
    novel_ids: &[usize],
) -> Result<(LabeledDataset, LabeledDataset)> {
    if base_ids.is_empty() || novel_ids.is_empty() {
        return Err(Error::Contract("base and novel category sets must both be nonempty".into()));
    }
    let base: BTreeSet<usize> = base_ids.iter().copied().collect();
    let novel: BTreeSet<usize> = novel_ids.iter().copied().collect();
    let overlap: Vec<usize> = base.intersection(&novel).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Contract(format!("base and novel categories overlap: {overlap:?}")));
    }
    if let Some(id) = base.union(&novel).find(|id| !ds.registry.contains_key(id)) {
        return Err(Error::Contract(format!("category {id} is not in the dataset")));
    }
    let view = |ids: &BTreeSet<usize>, keep_splits: bool| -> Result<LabeledDataset> {
        let dense: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let rows: Vec<usize> = (0..ds.len()).filter(|&i| dense.contains_key(&ds.labels[i])).collect();
        let mut sub = ds.select(&rows);
        sub.labels = sub.labels.iter().map(|l| dense[l]).collect();
        if !keep_splits {
            sub.splits = vec![Split::Train; sub.labels.len()];
        }
        sub.registry = dense.iter().map(|(id, i)| (*i, ds.registry[id].clone())).collect();
        Ok(sub)
    };
    Ok((view(&base, true)?, view(&novel, false)?))
}

/// Optional expectations applied while parsing a CSV file.
#[derive(Clone, Debug, Default)]
pub struct CsvSchema {
    /// Required number of feature columns.
    pub feature_dim: Option<usize>,
    /// Allowed labels, in addition to any declared in the file.
    pub labels: Option<BTreeSet<usize>>,
}

pub fn to_csv(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    if let Some((h, w)) = ds.grid {
        let _ = writeln!(out, "# dims: {h} {w}");
    }
    for (id, name) in &ds.registry {
        let _ = writeln!(out, "# category: {id} {name}");
    }
    let mut current = None;
    for i in 0..ds.len() {
        if current != Some(ds.splits[i]) {
            let _ = writeln!(out, "# split: {}", ds.splits[i].name());
            current = Some(ds.splits[i]);
        }
        let _ = write!(out, "{}", ds.labels[i]);
        for v in ds.example(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(ds))?;
    Ok(())
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    parse_csv(&bytes, schema)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses CSV bytes. Never panics: any input gives a dataset or a located error.
pub fn parse_csv(bytes: &[u8], schema: &CsvSchema) -> Result<LabeledDataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count() + 1;
        parse_err(line, "invalid UTF-8")
    })?;
    let mut grid = None;
    let mut declared: BTreeMap<usize, String> = BTreeMap::new();
    let mut split = Split::Train;
    let mut dim = schema.feature_dim;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut seen_rows = false;

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix('#') {
            let directive = directive.trim();
            if let Some(rest) = directive.strip_prefix("dims:") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                let parsed: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
                match parsed.as_deref() {
                    Some([h, w]) if *h > 0 && *w > 0 && !seen_rows => grid = Some((*h, *w)),
                    _ => return Err(parse_err(line_no, format!("bad dims directive {line:?}"))),
                }
            } else if let Some(rest) = directive.strip_prefix("category:") {
                let rest = rest.trim();
                let (id, name) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                let id: usize = id
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad category id in {line:?}")))?;
                let name = if name.trim().is_empty() {
                    format!("c{id}")
                } else {
                    name.trim().to_string()
                };
                declared.insert(id, name);
            } else if let Some(rest) = directive.strip_prefix("split:") {
                split = Split::parse(rest.trim())
                    .ok_or_else(|| parse_err(line_no, format!("unknown split {:?}", rest.trim())))?;
            }
            continue;
        }
        seen_rows = true;
        let mut cells = line.split(',');
        let label_cell = cells.next().unwrap_or("").trim();
        let label: i64 = label_cell
            .parse()
            .map_err(|_| parse_err(line_no, format!("label {label_cell:?} is not an integer")))?;
        let values: Vec<f64> = cells
            .map(|c| {
                let c = c.trim();
                c.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line_no, format!("feature {c:?} is not a finite number")))
            })
            .collect::<Result<_>>()?;
        let expected = match (dim, grid) {
            (Some(d), _) => d,
            (None, Some((h, w))) => h * w,
            (None, None) => values.len(),
        };
        if values.len() != expected || expected == 0 {
            return Err(parse_err(
                line_no,
                format!("expected {expected} feature columns, found {}", values.len()),
            ));
        }
        dim = Some(expected);
        let restricted = !declared.is_empty() || schema.labels.is_some();
        let known = label >= 0
            && (declared.contains_key(&(label as usize))
                || schema.labels.as_ref().is_some_and(|s| s.contains(&(label as usize))));
        if label < 0 || (restricted && !known) {
            return Err(Error::Registry { label, line: line_no });
        }
        labels.push(label as usize);
        features.extend(values);
        splits.push(split);
    }
    if labels.is_empty() {
        return Err(Error::Contract("dataset file contains no examples".into()));
    }
    let dim = dim.unwrap_or(0);
    if let Some((h, w)) = grid {
        if h * w != dim {
            return Err(parse_err(1, format!("grid {h}x{w} does not match {dim} feature columns")));
        }
    }
    let mut registry = declared;
    for l in &labels {
        registry.entry(*l).or_insert_with(|| format!("c{l}"));
    }
    LabeledDataset::new(dim, grid, features, labels, splits, registry)
}
