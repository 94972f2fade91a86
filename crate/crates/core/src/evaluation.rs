//! Episodic evaluation: sampling, two-stream accuracies, the base/novel
//! prior, confidence intervals and cosine diagnostics.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::datasets::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{aggregate, angular_distance_matrix, cosine, imprint_novel_weights, Aggregate, WeightMatrixView};
use crate::losses::LossConfig;
use crate::model::BlockNetwork;
use crate::optim::OptimizerConfig;
use crate::tensor::{norm, Tensor};
use crate::training::{derive_seed, finetune_stage2, prepare_stage2, Stage2History};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Novel queries per sampled category.
    pub t_novel: usize,
    /// Base queries per base category, drawn from the base test split.
    pub t_base: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            t_novel: 15,
            t_base: 15,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.t_novel == 0 || self.t_base == 0 {
            return Err(Error::Config("n_way, k_shot, t_novel and t_base must all be positive".into()));
        }
        Ok(())
    }
}

/// Row indices into the novel pool (support, novel queries) and the base
/// data (base queries).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    /// Pool labels of the sampled categories; novel column `c` is `novel_category_ids[c]`.
    pub novel_category_ids: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query_novel: Vec<Vec<usize>>,
    pub query_base: Vec<usize>,
}

/// Uniform sampling without replacement. Support and queries of a category
/// come from one shuffle (support is its prefix), so support sets for
/// different `k` under the same seed are nested.
pub fn sample_episode(
    pool: &LabeledDataset,
    base: &LabeledDataset,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_label: Vec<(usize, Vec<usize>)> = pool
        .indices_by_label(None)
        .into_iter()
        .filter(|(_, rows)| !rows.is_empty())
        .collect();
    if by_label.len() < cfg.n_way {
        return Err(Error::Contract(format!(
            "novel pool has {} categories, episode needs {}",
            by_label.len(),
            cfg.n_way
        )));
    }
    let mut picked = index::sample(&mut rng, by_label.len(), cfg.n_way).into_vec();
    picked.sort_unstable();
    let need = cfg.k_shot + cfg.t_novel;
    let mut ep = Episode {
        seed,
        novel_category_ids: Vec::with_capacity(cfg.n_way),
        support: Vec::with_capacity(cfg.n_way),
        query_novel: Vec::with_capacity(cfg.n_way),
        query_base: Vec::new(),
    };
    for p in picked {
        let (label, rows) = &by_label[p];
        if rows.len() < need {
            return Err(Error::Contract(format!(
                "novel category {label} has {} examples, episode needs {need} ({} support + {} query)",
                rows.len(),
                cfg.k_shot,
                cfg.t_novel
            )));
        }
        let mut rows = rows.clone();
        rows.shuffle(&mut rng);
        ep.novel_category_ids.push(*label);
        ep.support.push(rows[..cfg.k_shot].to_vec());
        ep.query_novel.push(rows[cfg.k_shot..need].to_vec());
    }
    for (label, mut rows) in base.indices_by_label(Some(Split::Test)) {
        if rows.len() < cfg.t_base {
            return Err(Error::Contract(format!(
                "base category {label} has {} test examples, episode needs {}",
                rows.len(),
                cfg.t_base
            )));
        }
        rows.shuffle(&mut rng);
        ep.query_base.extend_from_slice(&rows[..cfg.t_base]);
    }
    Ok(ep)
}

/// Episodes with independent seeds derived from `seed`.
pub fn sample_episodes(
    pool: &LabeledDataset,
    base: &LabeledDataset,
    cfg: &EpisodeConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    (0..n as u64)
        .map(|e| sample_episode(pool, base, cfg, derive_seed(seed, e)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prior {
    pub p_base: f64,
    pub p_novel: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self {
            p_base: 0.2,
            p_novel: 0.8,
        }
    }
}

impl Prior {
    pub fn from_base(p_base: f64) -> Result<Self> {
        let p = Self {
            p_base,
            p_novel: 1.0 - p_base,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.p_base >= 0.0 && self.p_novel >= 0.0 && (self.p_base + self.p_novel - 1.0).abs() <= 1e-12;
        if !ok {
            return Err(Error::Config(format!(
                "prior must be nonnegative and sum to 1, got p_base={} p_novel={}",
                self.p_base, self.p_novel
            )));
        }
        Ok(())
    }
}

/// Row-wise softmax of `s · scores`, base columns (the first `n_base`)
/// reweighted by `p_base`, novel columns by `p_novel`, then renormalized.
pub fn apply_prior(scores: &Tensor, n_base: usize, scale: f64, prior: &Prior) -> Result<Tensor> {
    prior.validate()?;
    let (m, c) = scores.expect_matrix("apply_prior")?;
    if n_base > c {
        return Err(Error::Contract(format!("{n_base} base columns in a {c}-column score matrix")));
    }
    let mut out = Vec::with_capacity(m * c);
    for i in 0..m {
        let row = scores.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(scale * b));
        let mut p: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let w = if j < n_base { prior.p_base } else { prior.p_novel };
                (scale * v - max).exp() * w
            })
            .collect();
        let z: f64 = p.iter().sum();
        if z > 0.0 {
            p.iter_mut().for_each(|v| *v /= z);
        }
        out.extend(p);
    }
    Tensor::new(vec![m, c], out)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

pub fn predictions(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|i| argmax(scores.row(i))).collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of rows whose label is among the `k` highest-scoring columns,
/// ties broken toward the lower column index.
pub fn topk_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (m, c) = scores.expect_matrix("topk_accuracy")?;
    if k == 0 || k > c {
        return Err(Error::Contract(format!("k must lie in [1, {c}], got {k}")));
    }
    if labels.len() != m || m == 0 {
        return Err(Error::Contract(format!("{} labels for {m} score rows", labels.len())));
    }
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Contract(format!("label {l} out of range for {c} columns")));
        }
        let row = scores.row(i);
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > row[l] || (v == row[l] && j < l))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / m as f64)
}

/// Base-stream accuracy over the base columns on one split.
pub fn accuracy_on_split(net: &BlockNetwork, data: &LabeledDataset, split: Split) -> Result<f64> {
    let rows = data.indices_in(split);
    if rows.is_empty() {
        return Err(Error::Contract(format!("no examples in the {split:?} split")));
    }
    let labels: Vec<usize> = rows.iter().map(|&i| data.label(i)).collect();
    let scores = net.base_scores(&data.tensor(&rows)?)?;
    Ok(accuracy(&predictions(&scores), &labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    Finetune,
    /// Imprinted novel weights and an untrained copy of the top blocks.
    Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub stage2: OptimizerConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub n_top: usize,
    pub prior: Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub acc_novel: f64,
    pub acc_both: f64,
    pub acc_base: f64,
    pub acc_both_prior: f64,
    /// Share of Both queries predicted as a novel column, without and with the prior.
    pub novel_fraction: f64,
    pub novel_fraction_prior: f64,
    /// Largest cosine between a novel weight and any other weight.
    pub max_weight_cosine: f64,
    /// Smallest cosine between a category's aggregated support features and its novel weight.
    pub min_support_weight_cosine: f64,
    pub finetune_steps: usize,
    pub final_aws_active: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub result: EpisodeResult,
    pub history: Stage2History,
}

/// Support tensors of an episode, restricted to the first `k` shots.
pub fn support_tensors(pool: &LabeledDataset, episode: &Episode, k: Option<usize>) -> Result<Vec<Tensor>> {
    episode
        .support
        .iter()
        .map(|rows| pool.tensor(&rows[..k.unwrap_or(rows.len()).min(rows.len())]))
        .collect()
}

/// Accuracies and geometry of a network whose novel columns follow the
/// episode's category order.
pub fn score_episode(
    net: &BlockNetwork,
    base: &LabeledDataset,
    pool: &LabeledDataset,
    episode: &Episode,
    support: &[Tensor],
    prior: &Prior,
    aggregate_kind: Aggregate,
) -> Result<EpisodeResult> {
    let n_base = net.classifier.n_base();
    let n_novel = net.classifier.n_novel();
    if n_novel != episode.novel_category_ids.len() {
        return Err(Error::Contract(format!(
            "{n_novel} novel columns for a {}-way episode",
            episode.novel_category_ids.len()
        )));
    }
    let mut novel_rows = Vec::new();
    let mut novel_labels = Vec::new();
    for (c, rows) in episode.query_novel.iter().enumerate() {
        novel_rows.extend_from_slice(rows);
        novel_labels.extend(std::iter::repeat_n(c, rows.len()));
    }
    let novel_scores = net.scores_two_stream(&pool.tensor(&novel_rows)?)?;
    let novel_only: Vec<usize> = (0..novel_scores.rows())
        .map(|i| argmax(&novel_scores.row(i)[n_base..]))
        .collect();
    let acc_novel = accuracy(&novel_only, &novel_labels);

    let base_labels: Vec<usize> = episode.query_base.iter().map(|&i| base.label(i)).collect();
    let base_scores = net.scores_two_stream(&base.tensor(&episode.query_base)?)?;
    let both_scores = stack_rows(&novel_scores, &base_scores)?;
    let both_labels: Vec<usize> = novel_labels
        .iter()
        .map(|c| n_base + c)
        .chain(base_labels.iter().copied())
        .collect();
    let plain = predictions(&both_scores);
    let with_prior = predictions(&apply_prior(&both_scores, n_base, net.classifier.scale.get(), prior)?);
    let novel_share = |p: &[usize]| p.iter().filter(|&&j| j >= n_base).count() as f64 / p.len() as f64;

    let w_n = net.classifier.novel.as_ref().expect("checked by scores_two_stream");
    let view = WeightMatrixView::new(Some(&net.classifier.base), w_n)?;
    let u = angular_distance_matrix(&view)?;
    let max_weight_cosine = u.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut min_cos = f64::INFINITY;
    for (c, s) in support.iter().enumerate() {
        let g = aggregate(&net.forward_novel(s)?, aggregate_kind)?;
        min_cos = min_cos.min(cosine(g.values(), &w_n.column(c))?);
    }

    Ok(EpisodeResult {
        seed: episode.seed,
        acc_novel,
        acc_both: accuracy(&plain, &both_labels),
        acc_base: accuracy_on_split(net, base, Split::Test)?,
        acc_both_prior: accuracy(&with_prior, &both_labels),
        novel_fraction: novel_share(&plain),
        novel_fraction_prior: novel_share(&with_prior),
        max_weight_cosine,
        min_support_weight_cosine: min_cos,
        finetune_steps: 0,
        final_aws_active: None,
    })
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("stack rows", a.shape(), b.shape()));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Builds the episode's novel stream from a stage-1 snapshot (fine-tuned or
/// ablated) and scores it.
pub fn evaluate_episode(
    snapshot: &BlockNetwork,
    base: &LabeledDataset,
    pool: &LabeledDataset,
    episode: &Episode,
    mode: EpisodeMode,
    settings: &EvalSettings,
) -> Result<EpisodeOutcome> {
    if snapshot.is_duplicated() {
        return Err(Error::State("evaluation starts from a stage-1 snapshot".into()));
    }
    let support = support_tensors(pool, episode, None)?;
    let mut net = snapshot.clone();
    let (history, kind) = match mode {
        EpisodeMode::Finetune => {
            prepare_stage2(&mut net, &support, &settings.loss, settings.n_top)?;
            let h = finetune_stage2(
                &mut net,
                &support,
                pool.grid(),
                &settings.stage2,
                &settings.loss,
                &settings.augmentation,
                episode.seed,
            )?;
            (h, settings.loss.stage2_aggregate()?)
        }
        EpisodeMode::Ablation => {
            net.duplicate_top_blocks(settings.n_top)?;
            let features = support
                .iter()
                .map(|s| net.forward_novel(s))
                .collect::<Result<Vec<_>>>()?;
            net.set_novel_weights(imprint_novel_weights(&features, Aggregate::NormalizedSum)?)?;
            (Stage2History::default(), Aggregate::NormalizedSum)
        }
    };
    let mut result = score_episode(&net, base, pool, episode, &support, &settings.prior, kind)?;
    result.finetune_steps = history.steps.len();
    result.final_aws_active = history.steps.last().map(|r| r.aws_active);
    Ok(EpisodeOutcome { result, history })
}

/// Evaluates episodes in parallel over a shared snapshot; `jobs` caps the
/// worker count. Results come back in episode order.
pub fn evaluate_episodes(
    snapshot: &BlockNetwork,
    base: &LabeledDataset,
    pool: &LabeledDataset,
    episodes: &[Episode],
    mode: EpisodeMode,
    settings: &EvalSettings,
    jobs: Option<usize>,
) -> Result<Vec<EpisodeOutcome>> {
    let run = || {
        episodes
            .par_iter()
            .map(|e| evaluate_episode(snapshot, base, pool, e, mode, settings))
            .collect::<Result<Vec<_>>>()
    };
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

/// Mean, sample standard deviation and `1.96·std/√n`. A single value gives
/// zero spread.
pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::Contract("cannot summarize zero episodes".into()));
    }
    // sorted summation keeps the result independent of episode order
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return Ok(MetricSummary {
            mean,
            std: 0.0,
            ci95: 0.0,
        });
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let std = (dev.iter().sum::<f64>() / (n - 1.0)).sqrt();
    Ok(MetricSummary {
        mean,
        std,
        ci95: 1.96 * std / n.sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_episodes: usize,
    /// Set when only one episode was run, so the spread is undefined.
    pub single_episode: bool,
    pub acc_novel: MetricSummary,
    pub acc_both: MetricSummary,
    pub acc_base: MetricSummary,
    pub acc_both_prior: MetricSummary,
}

pub fn aggregate_results(results: &[EpisodeResult]) -> Result<AggregateReport> {
    let pick = |f: fn(&EpisodeResult) -> f64| summarize(&results.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        n_episodes: results.len(),
        single_episode: results.len() == 1,
        acc_novel: pick(|r| r.acc_novel)?,
        acc_both: pick(|r| r.acc_both)?,
        acc_base: pick(|r| r.acc_base)?,
        acc_both_prior: pick(|r| r.acc_both_prior)?,
    })
}

/// One row per episode for plotting.
pub fn results_csv(results: &[EpisodeResult]) -> String {
    let mut out = String::from(
        "seed,acc_novel,acc_both,acc_base,acc_both_prior,novel_fraction,novel_fraction_prior,max_weight_cosine,min_support_weight_cosine,finetune_steps\n",
    );
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.acc_novel,
            r.acc_both,
            r.acc_base,
            r.acc_both_prior,
            r.novel_fraction,
            r.novel_fraction_prior,
            r.max_weight_cosine,
            r.min_support_weight_cosine,
            r.finetune_steps
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

/// Quantiles by linear interpolation between order statistics.
pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(FiveNumber {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
        count: v.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineDiagnostics {
    /// Pairwise cosines between features of the same base category.
    pub within_base: Option<FiveNumber>,
    /// Pairwise cosines between base category medians.
    pub base_medians: Option<FiveNumber>,
    /// Pairwise cosines between novel category medians.
    pub novel_medians: Option<FiveNumber>,
    /// Base categories left out of `within_base` for having fewer than two examples.
    pub excluded_categories: Vec<usize>,
    pub warnings: Vec<String>,
}

fn coordinate_median(features: &Tensor, rows: &[usize]) -> Vec<f64> {
    (0..features.cols())
        .map(|j| {
            let mut col: Vec<f64> = rows.iter().map(|&i| features.row(i)[j]).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect()
}

fn median_cosines(net: &BlockNetwork, data: &LabeledDataset) -> Result<Vec<f64>> {
    let features = net.forward_base(&data.tensor(&(0..data.len()).collect::<Vec<_>>())?)?;
    let medians: Vec<Vec<f64>> = data
        .indices_by_label(None)
        .values()
        .filter(|rows| !rows.is_empty())
        .map(|rows| coordinate_median(&features, rows))
        .collect();
    let mut out = Vec::new();
    for i in 0..medians.len() {
        for j in i + 1..medians.len() {
            out.push(cosine(&medians[i], &medians[j])?);
        }
    }
    Ok(out)
}

/// Cosine structure of stage-1 features: within base categories, between
/// base category medians and between novel category medians.
pub fn cosine_diagnostics(net: &BlockNetwork, base: &LabeledDataset, novel: &LabeledDataset) -> Result<CosineDiagnostics> {
    let features = net.forward_base(&base.tensor(&(0..base.len()).collect::<Vec<_>>())?)?;
    let unit: Vec<Vec<f64>> = (0..features.rows())
        .map(|i| {
            let r = features.row(i);
            let n = norm(r);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut within = Vec::new();
    let mut excluded = Vec::new();
    let mut warnings = Vec::new();
    for (label, rows) in base.indices_by_label(None) {
        if rows.len() < 2 {
            excluded.push(label);
            warnings.push(format!("base category {label} has {} examples; excluded from within-category cosines", rows.len()));
            continue;
        }
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                if !(norm(features.row(i)) > 0.0 && norm(features.row(j)) > 0.0) {
                    return Err(Error::Degenerate {
                        what: "feature row",
                        index: if norm(features.row(i)) > 0.0 { j } else { i },
                        norm: 0.0,
                    });
                }
                let c: f64 = unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum();
                within.push(c.clamp(-1.0, 1.0));
            }
        }
    }
    Ok(CosineDiagnostics {
        within_base: five_number(&within),
        base_medians: five_number(&median_cosines(net, base)?),
        novel_medians: five_number(&median_cosines(net, novel)?),
        excluded_categories: excluded,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_blobs, split_base_novel, BlobSpec};

    fn data() -> (LabeledDataset, LabeledDataset) {
        let ds = generate_blobs(&BlobSpec {
            n_categories: 8,
            dim: 8,
            train_per_category: 25,
            val_per_category: 5,
            test_per_category: 20,
            max_cosine: 0.3,
            noise_sigma: 0.1,
            seed: 2,
        })
        .unwrap();
        split_base_novel(&ds, &[0, 1, 2], &[3, 4, 5, 6, 7]).unwrap()
    }

    #[test]
    fn episode_counts_and_disjointness() {
        let (base, pool) = data();
        let cfg = EpisodeConfig {
            n_way: 5,
            k_shot: 1,
            t_novel: 4,
            t_base: 3,
        };
        let ep = sample_episode(&pool, &base, &cfg, 7).unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
        for (s, q) in ep.support.iter().zip(&ep.query_novel) {
            assert!(s.iter().all(|i| !q.contains(i)));
            assert_eq!(q.len(), 4);
        }
        assert_eq!(ep.query_base.len(), 9);
        assert!(ep.query_base.iter().all(|&i| base.split(i) == Split::Test));
        assert_eq!(ep, sample_episode(&pool, &base, &cfg, 7).unwrap());
    }

    #[test]
    fn support_is_nested_across_k() {
        let (base, pool) = data();
        let small = EpisodeConfig {
            k_shot: 2,
            ..EpisodeConfig::default()
        };
        let large = EpisodeConfig {
            k_shot: 5,
            ..EpisodeConfig::default()
        };
        let a = sample_episode(&pool, &base, &small, 3).unwrap();
        let b = sample_episode(&pool, &base, &large, 3).unwrap();
        for (x, y) in a.support.iter().zip(&b.support) {
            assert_eq!(&y[..2], &x[..]);
        }
    }

    #[test]
    fn insufficient_pool_is_a_contract_error() {
        let (base, pool) = data();
        let cfg = EpisodeConfig {
            n_way: 6,
            ..EpisodeConfig::default()
        };
        assert!(matches!(sample_episode(&pool, &base, &cfg, 0), Err(Error::Contract(_))));
        let cfg = EpisodeConfig {
            k_shot: 30,
            t_novel: 30,
            ..EpisodeConfig::default()
        };
        match sample_episode(&pool, &base, &cfg, 0) {
            Err(Error::Contract(msg)) => assert!(msg.contains("50 examples"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_value_statistics() {
        let s = summarize(&[0.5, 0.7]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-12);
        assert!((s.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((s.ci95 - 1.96 * 0.1).abs() < 1e-12);
        let same = summarize(&[0.3; 5]).unwrap();
        assert_eq!(same.ci95, 0.0);
        assert_eq!(summarize(&[0.4]).unwrap().ci95, 0.0);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn topk_examples() {
        let s = Tensor::from_rows(&[vec![0.9, 0.8, 0.1]]).unwrap();
        assert_eq!(topk_accuracy(&s, &[1], 2).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&s, &[2], 3).unwrap(), 1.0);
        assert!(topk_accuracy(&s, &[0], 4).is_err());
        let tie = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(topk_accuracy(&tie, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&tie, &[1], 1).unwrap(), 0.0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn prior_examples() {
        let s = Tensor::from_rows(&[vec![0.9, 0.1, 0.3], vec![-0.2, 0.4, 0.1]]).unwrap();
        let uniform = apply_prior(&s, 2, 10.0, &Prior::from_base(0.5).unwrap()).unwrap();
        assert_eq!(predictions(&uniform), predictions(&s));
        let novel_only = apply_prior(&s, 2, 10.0, &Prior::from_base(0.0).unwrap()).unwrap();
        assert!(predictions(&novel_only).iter().all(|&p| p >= 2));
        for i in 0..2 {
            assert!((novel_only.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(apply_prior(&s, 2, 10.0, &Prior { p_base: 0.3, p_novel: 0.3 }).is_err());
        assert!(Prior::from_base(1.5).is_err());
        assert_eq!(Prior::default(), Prior { p_base: 0.2, p_novel: 0.8 });
    }

    #[test]
    fn five_number_order() {
        let f = five_number(&[3.0, 1.0, 2.0, 4.0, 5.0]).unwrap();
        assert_eq!((f.min, f.q1, f.median, f.q3, f.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(five_number(&[1.0]).unwrap().median, 1.0);
        assert!(five_number(&[]).is_none());
    }

    #[test]
    fn identical_features_give_unit_within_cosine() {
        let ds = generate_blobs(&BlobSpec {
            n_categories: 3,
            dim: 4,
            train_per_category: 4,
            val_per_category: 0,
            test_per_category: 0,
            max_cosine: 0.0,
            noise_sigma: 0.0,
            seed: 1,
        })
        .unwrap();
        let (base, novel) = split_base_novel(&ds, &[0, 1], &[2]).unwrap();
        let net = BlockNetwork::new(4, crate::model::BlockSpec::default(), 2, 10.0, 0).unwrap();
        let d = cosine_diagnostics(&net, &base, &novel).unwrap();
        let w = d.within_base.unwrap();
        assert!((w.min - 1.0).abs() < 1e-12 && (w.max - 1.0).abs() < 1e-12);
        assert!(d.novel_medians.is_none());
    }
}
