//! Scaled-cosine cross-entropy, weight-centric feature clustering (WCFC),
//! angular weight separation (AWS) and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{aggregate_on_tape, angular_distance_on_tape, Aggregate};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower bound the scale is projected onto after every update.
pub const MIN_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub margin_m: f64,
    pub wcfc_type_stage1: u8,
    pub wcfc_type_stage2: u8,
    pub scale_init: f64,
    pub log_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha: 1.0,
            beta: 1.0,
            margin_m: 0.6,
            wcfc_type_stage1: 1,
            wcfc_type_stage2: 2,
            scale_init: 10.0,
            log_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_m > 0.0 && self.margin_m < 1.0) {
            return Err(Error::Config(format!("margin_m must lie in (0, 1), got {}", self.margin_m)));
        }
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if !(self.scale_init > 0.0 && self.scale_init.is_finite()) {
            return Err(Error::Config(format!("scale_init must be positive, got {}", self.scale_init)));
        }
        if !(self.log_clamp > 0.0 && self.log_clamp < 1.0) {
            return Err(Error::Config(format!("log_clamp must lie in (0, 1), got {}", self.log_clamp)));
        }
        self.stage1_aggregate()?;
        self.stage2_aggregate()?;
        Ok(())
    }

    pub fn stage1_aggregate(&self) -> Result<Aggregate> {
        Aggregate::from_type(self.wcfc_type_stage1)
    }

    pub fn stage2_aggregate(&self) -> Result<Aggregate> {
        Aggregate::from_type(self.wcfc_type_stage2)
    }

    /// Sets γ, α, β from a three-character code such as `"101"`.
    pub fn with_weights_code(mut self, code: &str) -> Result<Self> {
        let bits: Vec<f64> = code
            .chars()
            .map(|c| match c {
                '0' => Ok(0.0),
                '1' => Ok(1.0),
                _ => Err(Error::Config(format!("loss weight code {code:?} must be three binary digits"))),
            })
            .collect::<Result<_>>()?;
        if bits.len() != 3 {
            return Err(Error::Config(format!("loss weight code {code:?} must be three binary digits")));
        }
        self.gamma = bits[0];
        self.alpha = bits[1];
        self.beta = bits[2];
        Ok(self)
    }
}

/// The classifier's scale `s`. Learnable in stage 1, frozen in stage 2.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParameter {
    value: Tensor,
}

impl ScaleParameter {
    pub fn new(s: f64, learnable: bool) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {s}")));
        }
        Ok(Self {
            value: Tensor::scalar(s).with_requires_grad(learnable),
        })
    }

    pub fn get(&self) -> f64 {
        self.value.item()
    }

    pub fn learnable(&self) -> bool {
        self.value.requires_grad()
    }

    pub fn set_learnable(&mut self, flag: bool) {
        self.value.set_requires_grad(flag);
    }

    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    /// Clamps `s` back onto `[MIN_SCALE, ∞)`.
    pub fn project(&mut self) {
        let v = &mut self.value.data_mut()[0];
        if *v < MIN_SCALE {
            *v = MIN_SCALE;
        }
    }
}

/// Cosine scores `f̃ᵀw̃` for `features: [M×d]` against `weights: [d×C]`.
pub fn cosine_scores(tape: &mut Tape, features: Var, weights: Var) -> Result<Var> {
    let f = tape.l2_normalize_rows(features)?;
    let w = tape.l2_normalize_cols(weights)?;
    tape.matmul(f, w)
}

/// Mean cross-entropy over the scaled cosine scores.
pub fn cls_loss(tape: &mut Tape, features: Var, labels: &[usize], weights: Var, scale: Var) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Contract("cls_loss on an empty batch".into()));
    }
    let scores = cosine_scores(tape, features, weights)?;
    let logits = tape.mul(scores, scale)?;
    tape.cross_entropy(logits, labels)
}

/// `Σ_i −log clamp(g(f^i)ᵀ w_i/‖w_i‖, eps, 1)`.
///
/// `groups[i]` lists the rows of `features` belonging to the category whose
/// weight is column `i` of `weights`.
pub fn wcfc_loss(
    tape: &mut Tape,
    features: Var,
    groups: &[Vec<usize>],
    weights: Var,
    kind: Aggregate,
    log_clamp: f64,
) -> Result<Var> {
    let n_cols = tape.shape(weights).get(1).copied().unwrap_or(0);
    if groups.is_empty() {
        return Err(Error::Contract("wcfc_loss needs at least one category".into()));
    }
    if groups.len() != n_cols {
        return Err(Error::Contract(format!(
            "{} feature groups for {n_cols} weight columns",
            groups.len()
        )));
    }
    let w_unit = tape.l2_normalize_cols(weights)?;
    let mut total: Option<Var> = None;
    for (i, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::Contract(format!("category {i} has no support features")));
        }
        let f = tape.select_rows(features, rows)?;
        let g = aggregate_on_tape(tape, f, kind)?;
        let w = tape.select_cols(w_unit, &[i])?;
        let cos = tape.matmul(g, w)?;
        let cos = tape.clamp(cos, f64::NEG_INFINITY, 1.0);
        let l = tape.log_clamped(cos, log_clamp)?;
        total = Some(match total {
            Some(t) => tape.sub(t, l)?,
            None => tape.neg(l),
        });
    }
    let t = total.expect("at least one group");
    Ok(tape.sum(t))
}

/// Mean of `−log(1 − u_ij)` over pairs with `u_ij > margin`.
///
/// Returns the loss and the number of active pairs. With no active pair the
/// loss is a constant zero.
pub fn aws_loss(
    tape: &mut Tape,
    base: Option<Var>,
    novel: Var,
    margin: f64,
    log_clamp: f64,
) -> Result<(Var, usize)> {
    let u = angular_distance_on_tape(tape, base, novel)?;
    let active: Vec<usize> = tape
        .value(u)
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > margin)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return Ok((tape.constant(&Tensor::scalar(0.0)), 0));
    }
    let picked = tape.gather(u, &active)?;
    let neg = tape.neg(picked);
    let one_minus = tape.add_scalar(neg, 1.0);
    let logs = tape.log_clamped(one_minus, log_clamp)?;
    let m = tape.mean(logs);
    Ok((tape.neg(m), active.len()))
}

/// Everything a stage-2 loss evaluation needs, already on the tape.
#[derive(Clone, Debug)]
pub struct Stage2Batch {
    /// Novel-stream features of the whole training batch.
    pub features: Var,
    /// Labels indexing the concatenated `[W_B W_N]` columns.
    pub labels: Vec<usize>,
    /// Rows of `features` per novel category used for WCFC.
    pub groups: Vec<Vec<usize>>,
    pub base_weights: Option<Var>,
    pub novel_weights: Var,
    pub scale: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub wcfc: f64,
    pub aws: f64,
    pub aws_active: usize,
    pub total: f64,
}

/// `γ L_cls + α L_WCFC + β L_AWS`, with each unweighted term reported.
pub fn total_loss(tape: &mut Tape, batch: &Stage2Batch, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let all_w = match batch.base_weights {
        Some(b) => tape.concat_cols(b, batch.novel_weights)?,
        None => batch.novel_weights,
    };
    let cls = cls_loss(tape, batch.features, &batch.labels, all_w, batch.scale)?;
    let wcfc = wcfc_loss(
        tape,
        batch.features,
        &batch.groups,
        batch.novel_weights,
        cfg.stage2_aggregate()?,
        cfg.log_clamp,
    )?;
    let (aws, active) = aws_loss(tape, batch.base_weights, batch.novel_weights, cfg.margin_m, cfg.log_clamp)?;
    let total = weighted_sum(tape, &[(cfg.gamma, cls), (cfg.alpha, wcfc), (cfg.beta, aws)])?;
    let breakdown = LossBreakdown {
        cls: tape.scalar_value(cls),
        wcfc: tape.scalar_value(wcfc),
        aws: tape.scalar_value(aws),
        aws_active: active,
        total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = tape.constant(&Tensor::scalar(0.0));
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = tape.scale(v, w);
        acc = tape.add(acc, scaled)?;
    }
    Ok(acc)
}
