//! Hypersphere primitives: cosine similarity, the two feature aggregates,
//! the weight-to-novel-weight cosine matrix and weight imprinting.
//!
//! Plain functions here work on owned values. The `*_on_tape` variants
//! record the same computation on a [`Tape`] for the losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, norm, Tensor, EPS_NORM};

/// A vector with unit Euclidean norm.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn new(v: &[f64]) -> Result<Self> {
        let n = norm(v);
        if !(n > EPS_NORM) {
            return Err(Error::Degenerate {
                what: "vector",
                index: 0,
                norm: n,
            });
        }
        Ok(Self(v.iter().map(|x| x / n).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// How a category's support features are reduced to one direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregate {
    /// Normalized arithmetic mean of the raw features.
    #[serde(rename = "mean")]
    Mean,
    /// Normalized sum of the individually normalized features.
    #[serde(rename = "normalized_sum")]
    NormalizedSum,
}

impl Aggregate {
    /// Parses the numeric selector used in configs (`1` or `2`).
    pub fn from_type(t: u8) -> Result<Self> {
        match t {
            1 => Ok(Self::Mean),
            2 => Ok(Self::NormalizedSum),
            _ => Err(Error::Config(format!("aggregate type must be 1 or 2, got {t}"))),
        }
    }
}

/// Which group a weight column belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightGroup {
    Base,
    Novel,
}

/// The concatenated classifier matrix `[W_B W_N]` viewed column by column.
#[derive(Clone, Debug)]
pub struct WeightMatrixView {
    columns: Vec<Vec<f64>>,
    groups: Vec<WeightGroup>,
}

impl WeightMatrixView {
    /// `base` is `d × n_B` (may have zero columns) and `novel` is `d × n_N`.
    pub fn new(base: Option<&Tensor>, novel: &Tensor) -> Result<Self> {
        let mut columns = Vec::new();
        let mut groups = Vec::new();
        let d = novel.rows();
        if let Some(b) = base {
            if b.rows() != d {
                return Err(Error::shape("weight view", b.shape(), novel.shape()));
            }
            for j in 0..b.cols() {
                columns.push(b.column(j));
                groups.push(WeightGroup::Base);
            }
        }
        for j in 0..novel.cols() {
            columns.push(novel.column(j));
            groups.push(WeightGroup::Novel);
        }
        Ok(Self { columns, groups })
    }

    pub fn n_base(&self) -> usize {
        self.groups.iter().filter(|g| **g == WeightGroup::Base).count()
    }

    pub fn n_novel(&self) -> usize {
        self.groups.len() - self.n_base()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn groups(&self) -> &[WeightGroup] {
        &self.groups
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    for (index, v) in [a, b].iter().enumerate() {
        let n = norm(v);
        if !(n > EPS_NORM) {
            return Err(Error::Degenerate {
                what: "cosine operand",
                index,
                norm: n,
            });
        }
    }
    Ok((dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0))
}

fn check_nonempty(features: &Tensor) -> Result<(usize, usize)> {
    let (k, d) = features.expect_matrix("aggregate")?;
    if k == 0 {
        return Err(Error::Contract("aggregate needs at least one feature row".into()));
    }
    Ok((k, d))
}

/// Normalized mean of the rows.
pub fn aggregate_type1(features: &Tensor) -> Result<UnitVector> {
    let (k, d) = check_nonempty(features)?;
    let mut mean = vec![0.0; d];
    for i in 0..k {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    UnitVector::new(&mean)
}

/// Normalized sum of normalized rows.
pub fn aggregate_type2(features: &Tensor) -> Result<UnitVector> {
    UnitVector::new(&normalized_row_sum(features)?)
}

pub fn aggregate(features: &Tensor, kind: Aggregate) -> Result<UnitVector> {
    match kind {
        Aggregate::Mean => aggregate_type1(features),
        Aggregate::NormalizedSum => aggregate_type2(features),
    }
}

fn normalized_row_sum(features: &Tensor) -> Result<Vec<f64>> {
    let (k, d) = check_nonempty(features)?;
    let mut sum = vec![0.0; d];
    for i in 0..k {
        let row = features.row(i);
        let n = norm(row);
        if !(n > EPS_NORM) {
            return Err(Error::Degenerate {
                what: "feature row",
                index: i,
                norm: n,
            });
        }
        sum.iter_mut().zip(row).for_each(|(s, v)| *s += v / n);
    }
    Ok(sum)
}

/// Initial novel weights, one column per category.
///
/// Columns are left unnormalized: the mean feature for [`Aggregate::Mean`],
/// the sum of normalized features for [`Aggregate::NormalizedSum`].
pub fn imprint_novel_weights(support: &[Tensor], kind: Aggregate) -> Result<Tensor> {
    if support.is_empty() {
        return Err(Error::Contract("imprinting needs at least one category".into()));
    }
    let mut cols = Vec::with_capacity(support.len());
    for (c, feats) in support.iter().enumerate() {
        if feats.rows() == 0 || feats.shape().len() != 2 {
            return Err(Error::Contract(format!("category {c} has no support features")));
        }
        let col = match kind {
            Aggregate::Mean => {
                let k = feats.rows() as f64;
                let mut m = vec![0.0; feats.cols()];
                for i in 0..feats.rows() {
                    m.iter_mut().zip(feats.row(i)).for_each(|(a, v)| *a += v / k);
                }
                m
            }
            Aggregate::NormalizedSum => normalized_row_sum(feats)?,
        };
        cols.push(col);
    }
    Tensor::from_columns(&cols)
}

/// Cosine of every column of `[W_B W_N]` against every novel column.
/// Entry `(n_B + j, j)` compares a column with itself and is fixed at 0.
pub fn angular_distance_matrix(view: &WeightMatrixView) -> Result<Tensor> {
    let cols = view.columns();
    for (j, c) in cols.iter().enumerate() {
        let n = norm(c);
        if !(n > EPS_NORM) {
            return Err(Error::Degenerate {
                what: "weight column",
                index: j,
                norm: n,
            });
        }
    }
    let n_base = view.n_base();
    let n_novel = view.n_novel();
    let mut out = vec![0.0; cols.len() * n_novel];
    for (i, ci) in cols.iter().enumerate() {
        for j in 0..n_novel {
            if i == n_base + j {
                continue;
            }
            out[i * n_novel + j] = cosine(ci, &cols[n_base + j])?;
        }
    }
    Tensor::new(vec![cols.len(), n_novel], out)
}

/// Records the chosen aggregate of `features: [k×d]` as a `[1×d]` unit row.
pub fn aggregate_on_tape(tape: &mut Tape, features: Var, kind: Aggregate) -> Result<Var> {
    let k = tape.shape(features).first().copied().unwrap_or(0);
    if k == 0 {
        return Err(Error::Contract("aggregate needs at least one feature row".into()));
    }
    let summed = match kind {
        Aggregate::Mean => {
            let s = tape.sum_rows(features)?;
            tape.scale(s, 1.0 / k as f64)
        }
        Aggregate::NormalizedSum => {
            let n = tape.l2_normalize_rows(features)?;
            tape.sum_rows(n)?
        }
    };
    tape.l2_normalize_rows(summed).map_err(|e| match e {
        Error::Degenerate { norm, .. } => Error::Degenerate {
            what: "aggregate",
            index: 0,
            norm,
        },
        other => other,
    })
}

/// `u = W̃_allᵀ W̃_N` with self pairs masked to zero, shape `[(n_B+n_N) × n_N]`.
pub fn angular_distance_on_tape(tape: &mut Tape, base: Option<Var>, novel: Var) -> Result<Var> {
    let all = match base {
        Some(b) => tape.concat_cols(b, novel)?,
        None => novel,
    };
    let all_n = tape.l2_normalize_cols(all)?;
    let n_base = base.map_or(0, |b| tape.shape(b)[1]);
    let n_novel = tape.shape(novel)[1];
    let novel_n = tape.select_cols(all_n, &(n_base..n_base + n_novel).collect::<Vec<_>>())?;
    let all_t = tape.transpose(all_n)?;
    let u = tape.matmul(all_t, novel_n)?;
    let rows = n_base + n_novel;
    let mut mask = vec![1.0; rows * n_novel];
    for j in 0..n_novel {
        mask[(n_base + j) * n_novel + j] = 0.0;
    }
    let mask = tape.constant(&Tensor::new(vec![rows, n_novel], mask)?);
    tape.mul(u, mask)
}
