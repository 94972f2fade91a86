//! Stage-1 base training, stage-2 novel fine-tuning and the incremental
//! shot schedule.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentationConfig};
use crate::datasets::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::accuracy_on_split;
use crate::geometry::imprint_novel_weights;
use crate::losses::{cls_loss, total_loss, wcfc_loss, LossBreakdown, LossConfig, Stage2Batch};
use crate::model::{bind_blocks, forward_bound, BlockNetwork, BoundLinear, Dropout};
use crate::optim::{Optimizer, OptimizerConfig, ParamGroup};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Independent seed for sub-stream `stream` of a run (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One optimizer step, as written to the JSONL history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L_WCFC")]
    pub l_wcfc: f64,
    #[serde(rename = "L_AWS")]
    pub l_aws: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub aws_active: usize,
    pub s: f64,
    pub elapsed_ms: f64,
}

impl StepRecord {
    fn new(step: usize, b: &LossBreakdown, s: f64, start: Instant) -> Self {
        Self {
            step,
            l_cls: b.cls,
            l_wcfc: b.wcfc,
            l_aws: b.aws,
            l_total: b.total,
            aws_active: b.aws_active,
            s,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    #[serde(rename = "L_WCFC")]
    pub l_wcfc: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub val_accuracy: Option<f64>,
    pub s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_scale: f64,
}

pub fn write_history_jsonl(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in steps {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn check_finite(terms: &[(&str, f64)], at: &str) -> Result<()> {
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v} at {at}")));
        }
    }
    Ok(())
}

fn write_block_grads(grads: &Gradients, bound: &[Vec<BoundLinear>], params: &mut [&mut Tensor]) -> Result<()> {
    let vars = bound.iter().flatten().flat_map(|l| [l.weight, l.bias]);
    for (v, p) in vars.zip(params.iter_mut()) {
        grads.write_into(v, p)?;
    }
    Ok(())
}

/// Trains extractor, `W_B` and `s` on the train split of the base data with
/// `L_cls + L_WCFC` (stage-1 aggregate). Validation accuracy is taken on the
/// val split when present.
pub fn train_stage1(
    net: &mut BlockNetwork,
    data: &LabeledDataset,
    opt: &OptimizerConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<Stage1History> {
    opt.validate()?;
    loss.validate()?;
    if net.is_duplicated() {
        return Err(Error::State("stage 1 runs before the top blocks are duplicated".into()));
    }
    if !net.classifier.scale.learnable() {
        return Err(Error::State("the scale must be learnable in stage 1".into()));
    }
    if let Some(l) = data.labels().iter().find(|l| **l >= net.classifier.n_base()) {
        return Err(Error::Contract(format!(
            "label {l} exceeds the {} base columns",
            net.classifier.n_base()
        )));
    }
    let mut train = data.indices_in(Split::Train);
    if train.is_empty() {
        return Err(Error::Contract("no training examples in the base data".into()));
    }
    let has_val = !data.indices_in(Split::Val).is_empty();
    let kind = loss.stage1_aggregate()?;
    let dropout_rate = net.spec().dropout_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = Optimizer::new(opt)?;
    let mut history = Stage1History::default();
    let start = Instant::now();

    for epoch in 0..opt.epochs {
        train.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in train.chunks(opt.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(&data.tensor(batch)?);
            let bound = bind_blocks(&mut tape, net.blocks());
            let dropout = Some(Dropout {
                rate: dropout_rate,
                rng: &mut rng,
            });
            let features = forward_bound(&mut tape, x, &bound, true, dropout)?;
            let wb = tape.leaf(&net.classifier.base);
            let s = tape.leaf(net.classifier.scale.tensor());
            let cls = cls_loss(&mut tape, features, &labels, wb, s)?;

            let mut present: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (row, l) in labels.iter().enumerate() {
                present.entry(*l).or_default().push(row);
            }
            let cats: Vec<usize> = present.keys().copied().collect();
            let groups: Vec<Vec<usize>> = present.into_values().collect();
            let w_present = tape.select_cols(wb, &cats)?;
            let wcfc = wcfc_loss(&mut tape, features, &groups, w_present, kind, loss.log_clamp)?;
            let total = tape.add(cls, wcfc)?;

            let b = LossBreakdown {
                cls: tape.scalar_value(cls),
                wcfc: tape.scalar_value(wcfc),
                aws: 0.0,
                aws_active: 0,
                total: tape.scalar_value(total),
            };
            let at = format!("stage-1 epoch {epoch} step {}", history.steps.len());
            check_finite(&[("L_cls", b.cls), ("L_WCFC", b.wcfc)], &at)?;
            let grads = tape.backward(total)?;

            let (mut extractor, mut classifier) = net.stage1_params_mut();
            write_block_grads(&grads, &bound, &mut extractor)?;
            grads.write_into(wb, classifier[0])?;
            grads.write_into(s, classifier[1])?;
            optimizer.step(&mut [
                ParamGroup {
                    name: "extractor",
                    lr: opt.lr_extractor,
                    params: extractor,
                },
                ParamGroup {
                    name: "classifier",
                    lr: opt.lr_classifier,
                    params: classifier,
                },
            ])?;
            net.classifier.scale.project();

            sums = (sums.0 + b.cls, sums.1 + b.wcfc, sums.2 + b.total);
            batches += 1;
            history.steps.push(StepRecord::new(
                history.steps.len(),
                &b,
                net.classifier.scale.get(),
                start,
            ));
        }
        let n = batches as f64;
        history.epochs.push(EpochRecord {
            epoch,
            l_cls: sums.0 / n,
            l_wcfc: sums.1 / n,
            l_total: sums.2 / n,
            val_accuracy: if has_val {
                Some(accuracy_on_split(net, data, Split::Val)?)
            } else {
                None
            },
            s: net.classifier.scale.get(),
        });
    }
    history.final_scale = net.classifier.scale.get();
    Ok(history)
}

/// Duplicates the top blocks and imprints `W_N` from the support features of
/// the fresh novel stream with the stage-2 aggregate.
pub fn prepare_stage2(net: &mut BlockNetwork, support: &[Tensor], loss: &LossConfig, n_top: usize) -> Result<()> {
    net.duplicate_top_blocks(n_top)?;
    let features = support
        .iter()
        .map(|s| net.forward_novel(s))
        .collect::<Result<Vec<_>>>()?;
    let w = imprint_novel_weights(&features, loss.stage2_aggregate()?)?;
    net.set_novel_weights(w)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2History {
    pub steps: Vec<StepRecord>,
}

/// Fine-tunes the duplicated top blocks and `W_N` on the augmented support
/// set under `γ L_cls + α L_WCFC + β L_AWS`. Every step uses the whole
/// augmented set; WCFC groups are the original support rows.
#[allow(clippy::too_many_arguments)]
pub fn finetune_stage2(
    net: &mut BlockNetwork,
    support: &[Tensor],
    grid: Option<(usize, usize)>,
    opt: &OptimizerConfig,
    loss: &LossConfig,
    aug: &AugmentationConfig,
    seed: u64,
) -> Result<Stage2History> {
    opt.validate()?;
    loss.validate()?;
    if !net.is_duplicated() {
        return Err(Error::State("stage 2 needs duplicated top blocks".into()));
    }
    let n_novel = net.classifier.n_novel();
    if n_novel != support.len() {
        return Err(Error::Contract(format!(
            "{} support categories for {n_novel} novel weight columns",
            support.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expanded = augment(support, grid, aug, derive_seed(seed, 1))?;
    let n_base = net.classifier.n_base();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut offset = 0;
    for (c, (e, orig)) in expanded.iter().zip(support).enumerate() {
        rows.extend_from_slice(e.data());
        labels.extend(std::iter::repeat_n(n_base + c, e.rows()));
        groups.push((offset..offset + orig.rows()).collect::<Vec<_>>());
        offset += e.rows();
    }
    let x = Tensor::new(vec![labels.len(), net.input_dim()], rows)?;
    let bottom = net.forward_bottom(&x)?;
    let dropout_rate = net.spec().dropout_rate;
    let s_value = net.classifier.scale.get();
    let mut optimizer = Optimizer::new(opt)?;
    let mut history = Stage2History::default();
    let start = Instant::now();

    for step in 0..opt.iterations {
        let mut tape = Tape::new();
        let h = tape.constant(&bottom);
        let top = net.novel_top().expect("duplicated");
        let bound = bind_blocks(&mut tape, top);
        let dropout = Some(Dropout {
            rate: dropout_rate,
            rng: &mut rng,
        });
        let features = forward_bound(&mut tape, h, &bound, true, dropout)?;
        let base_weights = tape.constant(&net.classifier.base);
        let novel_weights: Var = tape.leaf(net.classifier.novel.as_ref().expect("checked"));
        let scale = tape.constant(net.classifier.scale.tensor());
        let batch = Stage2Batch {
            features,
            labels: labels.clone(),
            groups: groups.clone(),
            base_weights: Some(base_weights),
            novel_weights,
            scale,
        };
        let (total, b) = total_loss(&mut tape, &batch, loss)?;
        let at = format!("stage-2 step {step}");
        check_finite(
            &[("L_cls", b.cls), ("L_WCFC", b.wcfc), ("L_AWS", b.aws), ("L_total", b.total)],
            &at,
        )?;
        let grads = tape.backward(total)?;
        let (mut extractor, w) = net.stage2_params_mut()?;
        write_block_grads(&grads, &bound, &mut extractor)?;
        grads.write_into(novel_weights, w)?;
        optimizer.step(&mut [
            ParamGroup {
                name: "novel_extractor",
                lr: opt.lr_extractor,
                params: extractor,
            },
            ParamGroup {
                name: "novel_classifier",
                lr: opt.lr_classifier,
                params: vec![w],
            },
        ])?;
        history.steps.push(StepRecord::new(step, &b, s_value, start));
    }
    net.verify_frozen()?;
    Ok(history)
}

/// Per-stage outcome of the incremental protocol.
#[derive(Clone, Debug, Serialize)]
pub struct IncrementalStage<M> {
    pub shots: usize,
    pub history: Stage2History,
    pub metrics: M,
}

/// Runs stage 2 once per entry of a strictly increasing shot schedule.
/// Stage `t` trains on the first `schedule[t]` rows of every category of
/// `support`, so support sets are nested. Blocks are duplicated and `W_N`
/// imprinted only once, at the first stage; later stages continue from the
/// previous parameters. `metrics` runs after every stage.
#[allow(clippy::too_many_arguments)]
pub fn incremental_finetune<M>(
    snapshot: &BlockNetwork,
    support: &[Tensor],
    grid: Option<(usize, usize)>,
    schedule: &[usize],
    n_top: usize,
    opt: &OptimizerConfig,
    loss: &LossConfig,
    aug: &AugmentationConfig,
    seed: u64,
    mut metrics: impl FnMut(usize, &BlockNetwork) -> Result<M>,
) -> Result<(BlockNetwork, Vec<IncrementalStage<M>>)> {
    validate_schedule(schedule, support)?;
    let prefix = |k: usize| -> Result<Vec<Tensor>> {
        support
            .iter()
            .map(|s| s.select_rows(&(0..k).collect::<Vec<_>>()))
            .collect()
    };
    let mut net = snapshot.clone();
    let mut stages = Vec::with_capacity(schedule.len());
    for (t, &k) in schedule.iter().enumerate() {
        let shots = prefix(k)?;
        if t == 0 {
            prepare_stage2(&mut net, &shots, loss, n_top)?;
        }
        let stage_seed = if t == 0 { seed } else { derive_seed(seed, t as u64) };
        let history = finetune_stage2(&mut net, &shots, grid, opt, loss, aug, stage_seed)?;
        let m = metrics(t, &net)?;
        stages.push(IncrementalStage {
            shots: k,
            history,
            metrics: m,
        });
    }
    Ok((net, stages))
}

/// Checks that a shot schedule is nonempty, strictly increasing (so support
/// sets are nested) and within the available shots.
pub fn validate_schedule(schedule: &[usize], support: &[Tensor]) -> Result<()> {
    if schedule.is_empty() || schedule[0] == 0 {
        return Err(Error::Contract("shot schedule must be nonempty with positive entries".into()));
    }
    if let Some(w) = schedule.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Contract(format!(
            "shot schedule must strictly increase so support sets nest, found {} then {}",
            w[0], w[1]
        )));
    }
    let last = *schedule.last().expect("nonempty");
    if let Some((c, s)) = support.iter().enumerate().find(|(_, s)| s.rows() < last) {
        return Err(Error::Contract(format!(
            "category {c} has {} support examples, schedule needs {last}",
            s.rows()
        )));
    }
    Ok(())
}
