//! Block-structured feed-forward extractor with a cosine classifier.
//!
//! The extractor is a list of blocks of fully-connected layers. Every layer
//! is followed by ReLU except the very last one of the network. For stage 2
//! the top `n_top` blocks are duplicated into a novel stream; the bottom
//! blocks, the base top blocks, `W_B` and `s` are frozen from then on and
//! guarded by a checksum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::ScaleParameter;
use crate::tape::{Tape, Var};
use crate::tensor::{matmul_into, norm, Tensor, EPS_NORM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockSpec {
    /// Output width of each linear layer, grouped by block.
    pub blocks: Vec<Vec<usize>>,
    /// Inverted-dropout rate on the input of the final linear layer.
    pub dropout_rate: f64,
    /// Number of top blocks duplicated for the novel stream.
    pub n_top: usize,
}

impl Default for BlockSpec {
    fn default() -> Self {
        Self {
            blocks: vec![vec![64], vec![64], vec![64, 32]],
            dropout_rate: 0.0,
            n_top: 1,
        }
    }
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        if let Some(i) = self.blocks.iter().position(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::Config(format!("block {i} needs nonzero layer widths")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.dropout_rate > 0.0 && self.layer_count() < 2 {
            return Err(Error::Config("dropout needs a layer before the final one".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.blocks.last().and_then(|b| b.last()).unwrap_or(&0)
    }

    fn layer_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[1 × out]`
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("sized");
        let bias = Tensor::new(vec![1, fan_out], draw(fan_out)).expect("sized");
        Self { weight, bias }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (m, k) = x.expect_matrix("linear")?;
        let (k2, n) = self.weight.expect_matrix("linear")?;
        if k != k2 {
            return Err(Error::shape("linear", x.shape(), self.weight.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(x.data(), self.weight.data(), &mut out, m, k, n);
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(self.bias.data()).for_each(|(o, b)| *o += b);
        }
        Tensor::new(vec![m, n], out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layers: Vec<Linear>,
}

impl Block {
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn set_requires_grad(&mut self, flag: bool) {
        self.params_mut().for_each(|p| p.set_requires_grad(flag));
    }
}

/// Base and novel weight columns plus the scale `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineClassifier {
    /// `W_B`, `[d × n_B]`
    pub base: Tensor,
    /// `W_N`, `[d × n_N]`; absent before stage 2
    pub novel: Option<Tensor>,
    pub scale: ScaleParameter,
}

impl CosineClassifier {
    pub fn n_base(&self) -> usize {
        self.base.cols()
    }

    pub fn n_novel(&self) -> usize {
        self.novel.as_ref().map_or(0, Tensor::cols)
    }
}

/// Cosine of every row of `features` against every column of `weights`.
pub fn cosine_score_matrix(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (m, d) = features.expect_matrix("cosine scores")?;
    let (d2, c) = weights.expect_matrix("cosine scores")?;
    if d != d2 {
        return Err(Error::shape("cosine scores", features.shape(), weights.shape()));
    }
    let mut fu = features.data().to_vec();
    for (i, row) in fu.chunks_mut(d).enumerate() {
        let n = norm(row);
        if !(n > EPS_NORM) {
            return Err(Error::Degenerate {
                what: "feature row",
                index: i,
                norm: n,
            });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    let mut wu = weights.data().to_vec();
    for j in 0..c {
        let n = norm(&weights.column(j));
        if !(n > EPS_NORM) {
            return Err(Error::Degenerate {
                what: "weight column",
                index: j,
                norm: n,
            });
        }
        for i in 0..d {
            wu[i * c + j] /= n;
        }
    }
    let mut out = vec![0.0; m * c];
    matmul_into(&fu, &wu, &mut out, m, d, c);
    out.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Tensor::new(vec![m, c], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockNetwork {
    input_dim: usize,
    spec: BlockSpec,
    /// All base-stream blocks, bottom first.
    blocks: Vec<Block>,
    /// Number of top blocks duplicated; zero before stage 2.
    n_top: usize,
    novel_top: Option<Vec<Block>>,
    pub classifier: CosineClassifier,
    frozen_checksum: Option<String>,
}

/// Parameters of one linear layer recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

/// Records every layer of `blocks` as tape leaves, in parameter order.
pub fn bind_blocks(tape: &mut Tape, blocks: &[Block]) -> Vec<Vec<BoundLinear>> {
    blocks
        .iter()
        .map(|b| {
            b.layers
                .iter()
                .map(|l| BoundLinear {
                    weight: tape.leaf(&l.weight),
                    bias: tape.leaf(&l.bias),
                })
                .collect()
        })
        .collect()
}

/// Per-forward dropout source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Forward through bound blocks on the tape.
///
/// `ends_network` marks a segment whose last layer is the network's final
/// layer: it gets no ReLU, and dropout (when given) is applied to its input.
pub fn forward_bound(
    tape: &mut Tape,
    x: Var,
    bound: &[Vec<BoundLinear>],
    ends_network: bool,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let total: usize = bound.iter().map(Vec::len).sum();
    let mut h = x;
    let mut idx = 0;
    for layer in bound.iter().flatten() {
        idx += 1;
        let last = ends_network && idx == total;
        if last {
            if let Some(d) = dropout.as_mut().filter(|d| d.rate > 0.0) {
                let mask = dropout_mask(tape.shape(h), d.rate, d.rng);
                let mask = tape.constant(&mask);
                h = tape.mul(h, mask)?;
            }
        }
        let z = tape.matmul(h, layer.weight)?;
        let z = tape.add_row(z, layer.bias)?;
        h = if last { z } else { tape.relu(z) };
    }
    Ok(h)
}

fn dropout_mask(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn forward_plain(blocks: &[Block], x: &Tensor, ends_network: bool) -> Result<Tensor> {
    let total: usize = blocks.iter().map(|b| b.layers.len()).sum();
    let mut h = x.clone();
    let mut idx = 0;
    for layer in blocks.iter().flat_map(|b| &b.layers) {
        idx += 1;
        h = layer.forward(&h)?;
        if !(ends_network && idx == total) {
            h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(h)
}

fn hash_tensors<'a>(hasher: &mut Sha256, tensors: impl Iterator<Item = &'a Tensor>) {
    for t in tensors {
        for d in t.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
}

impl BlockNetwork {
    /// Fresh network with fan-in uniform initialization of every layer and of `W_B`.
    pub fn new(input_dim: usize, spec: BlockSpec, n_base: usize, scale_init: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        if input_dim == 0 || n_base == 0 {
            return Err(Error::Config("input_dim and n_base must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = input_dim;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for widths in &spec.blocks {
            let mut layers = Vec::with_capacity(widths.len());
            for &w in widths {
                layers.push(Linear::init(fan_in, w, &mut rng));
                fan_in = w;
            }
            blocks.push(Block { layers });
        }
        let d = spec.feature_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let base = Tensor::new(
            vec![d, n_base],
            (0..d * n_base).map(|_| rng.random_range(-bound..=bound)).collect(),
        )?;
        let mut net = Self {
            input_dim,
            spec,
            blocks,
            n_top: 0,
            novel_top: None,
            classifier: CosineClassifier {
                base,
                novel: None,
                scale: ScaleParameter::new(scale_init, true)?,
            },
            frozen_checksum: None,
        };
        net.set_stage1_trainable(true);
        Ok(net)
    }

    /// Reassembles a network from stored parts (checkpoint loading).
    pub(crate) fn from_parts(
        input_dim: usize,
        spec: BlockSpec,
        blocks: Vec<Block>,
        n_top: usize,
        novel_top: Option<Vec<Block>>,
        classifier: CosineClassifier,
    ) -> Result<Self> {
        spec.validate()?;
        let mut net = Self {
            input_dim,
            spec,
            blocks,
            n_top,
            novel_top,
            classifier,
            frozen_checksum: None,
        };
        if net.novel_top.is_some() {
            net.freeze_base();
            net.frozen_checksum = Some(net.base_checksum());
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn n_top(&self) -> usize {
        self.n_top
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn novel_top(&self) -> Option<&[Block]> {
        self.novel_top.as_deref()
    }

    pub fn novel_top_mut(&mut self) -> Option<&mut [Block]> {
        self.novel_top.as_deref_mut()
    }

    pub fn is_duplicated(&self) -> bool {
        self.novel_top.is_some()
    }

    pub fn bottom_blocks(&self) -> &[Block] {
        &self.blocks[..self.blocks.len() - self.n_top]
    }

    pub fn top_base_blocks(&self) -> &[Block] {
        &self.blocks[self.blocks.len() - self.n_top..]
    }

    fn set_stage1_trainable(&mut self, flag: bool) {
        self.blocks.iter_mut().for_each(|b| b.set_requires_grad(flag));
        self.classifier.base.set_requires_grad(flag);
        self.classifier.scale.set_learnable(flag);
    }

    fn freeze_base(&mut self) {
        self.set_stage1_trainable(false);
        if let Some(top) = self.novel_top.as_mut() {
            top.iter_mut().for_each(|b| b.set_requires_grad(true));
        }
        if let Some(w) = self.classifier.novel.as_mut() {
            w.set_requires_grad(true);
        }
    }

    /// Base-stream features: bottom blocks then the base top blocks.
    pub fn forward_base(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        forward_plain(&self.blocks, x, true)
    }

    /// Output of the bottom (always frozen in stage 2) blocks.
    pub fn forward_bottom(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.require_duplicated()?;
        forward_plain(self.bottom_blocks(), x, false)
    }

    /// Novel-stream features: bottom blocks then the duplicated top blocks.
    pub fn forward_novel(&self, x: &Tensor) -> Result<Tensor> {
        let bottom = self.forward_bottom(x)?;
        forward_plain(self.novel_top.as_deref().unwrap_or_default(), &bottom, true)
    }

    fn require_duplicated(&self) -> Result<()> {
        if self.novel_top.is_none() {
            return Err(Error::State("novel stream used before the top blocks were duplicated".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, w) = x.expect_matrix("forward")?;
        if w != self.input_dim {
            return Err(Error::shape("forward", x.shape(), &[x.rows(), self.input_dim]));
        }
        Ok(())
    }

    /// Base-column cosine scores of the base stream.
    pub fn base_scores(&self, x: &Tensor) -> Result<Tensor> {
        cosine_score_matrix(&self.forward_base(x)?, &self.classifier.base)
    }

    /// `[S_Base S_Novel]`: base stream against `W_B`, novel stream against `W_N`. Unscaled.
    pub fn scores_two_stream(&self, x: &Tensor) -> Result<Tensor> {
        let base = self.base_scores(x)?;
        let novel_w = self
            .classifier
            .novel
            .as_ref()
            .ok_or_else(|| Error::State("two-stream scoring needs novel weights".into()))?;
        if novel_w.cols() == 0 {
            return Ok(base);
        }
        let novel = cosine_score_matrix(&self.forward_novel(x)?, novel_w)?;
        base.concat_cols(&novel)
    }

    /// Copies the top `n_top` blocks into the novel stream and freezes
    /// everything on the base side.
    pub fn duplicate_top_blocks(&mut self, n_top: usize) -> Result<()> {
        if n_top == 0 || n_top >= self.blocks.len() {
            return Err(Error::Config(format!(
                "n_top must lie in [1, {}] for a {}-block network, got {n_top}",
                self.blocks.len().saturating_sub(1),
                self.blocks.len()
            )));
        }
        if self.novel_top.is_some() {
            return Err(Error::State("top blocks already duplicated".into()));
        }
        self.n_top = n_top;
        self.spec.n_top = n_top;
        self.novel_top = Some(self.blocks[self.blocks.len() - n_top..].to_vec());
        self.freeze_base();
        self.frozen_checksum = Some(self.base_checksum());
        Ok(())
    }

    /// Stage-1 trainable tensors: extractor parameters in [`bind_blocks`]
    /// order, then the classifier's `[W_B, s]`.
    pub fn stage1_params_mut(&mut self) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
        let extractor = self.blocks.iter_mut().flat_map(Block::params_mut).collect();
        let classifier = vec![&mut self.classifier.base, self.classifier.scale.tensor_mut()];
        (extractor, classifier)
    }

    /// Stage-2 trainable tensors: the duplicated top blocks and `W_N`.
    pub fn stage2_params_mut(&mut self) -> Result<(Vec<&mut Tensor>, &mut Tensor)> {
        let top = self
            .novel_top
            .as_mut()
            .ok_or_else(|| Error::State("stage 2 needs duplicated top blocks".into()))?;
        let w = self
            .classifier
            .novel
            .as_mut()
            .ok_or_else(|| Error::State("stage 2 needs imprinted novel weights".into()))?;
        Ok((top.iter_mut().flat_map(Block::params_mut).collect(), w))
    }

    /// Installs `W_N` (trainable).
    pub fn set_novel_weights(&mut self, w: Tensor) -> Result<()> {
        if w.rows() != self.feature_dim() || w.shape().len() != 2 {
            return Err(Error::shape("novel weights", w.shape(), &[self.feature_dim(), w.cols()]));
        }
        self.classifier.novel = Some(w.with_requires_grad(true));
        Ok(())
    }

    /// SHA-256 over every base-side parameter: all base blocks, `W_B` and `s`.
    pub fn base_checksum(&self) -> String {
        let mut h = Sha256::new();
        hash_tensors(&mut h, self.blocks.iter().flat_map(Block::params));
        hash_tensors(&mut h, [&self.classifier.base, self.classifier.scale.tensor()].into_iter());
        hex::encode(h.finalize())
    }

    /// SHA-256 over novel-side parameters.
    pub fn novel_checksum(&self) -> String {
        let mut h = Sha256::new();
        if let Some(top) = &self.novel_top {
            hash_tensors(&mut h, top.iter().flat_map(Block::params));
        }
        if let Some(w) = &self.classifier.novel {
            hash_tensors(&mut h, std::iter::once(w));
        }
        hex::encode(h.finalize())
    }

    /// Fails if any frozen parameter changed since duplication.
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_checksum {
            Some(c) if *c != self.base_checksum() => Err(Error::Invariant(
                "base-side parameters changed during stage 2".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Snapshot with the novel stream dropped, as it was right after stage 1.
    pub fn base_only(&self) -> Self {
        let mut net = Self {
            input_dim: self.input_dim,
            spec: self.spec.clone(),
            blocks: self.blocks.clone(),
            n_top: 0,
            novel_top: None,
            classifier: CosineClassifier {
                base: self.classifier.base.clone(),
                novel: None,
                scale: self.classifier.scale.clone(),
            },
            frozen_checksum: None,
        };
        net.set_stage1_trainable(true);
        net
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64) -> BlockNetwork {
        let spec = BlockSpec {
            blocks: vec![vec![6], vec![5], vec![4]],
            dropout_rate: 0.0,
            n_top: 1,
        };
        BlockNetwork::new(3, spec, 4, 10.0, seed).unwrap()
    }

    fn batch() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7], vec![0.0, 0.9, 0.1]]).unwrap()
    }

    #[test]
    fn identity_single_block_passes_input_through() {
        let spec = BlockSpec {
            blocks: vec![vec![2]],
            dropout_rate: 0.0,
            n_top: 1,
        };
        let mut net = BlockNetwork::new(2, spec, 2, 10.0, 0).unwrap();
        let l = &mut net.blocks_mut()[0].layers[0];
        l.weight = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        l.bias = Tensor::zeros(vec![1, 2]);
        let x = Tensor::from_rows(&[vec![-3.0, 4.5]]).unwrap();
        assert_eq!(net.forward_base(&x).unwrap(), x);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = small_net(1);
        let a = net.forward_base(&batch()).unwrap();
        let b = net.forward_base(&batch()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let net = small_net(1);
        let x = Tensor::zeros(vec![2, 5]);
        assert!(matches!(net.forward_base(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn seeded_dropout_mask_replays() {
        let spec = BlockSpec {
            blocks: vec![vec![8], vec![8, 4]],
            dropout_rate: 0.5,
            n_top: 1,
        };
        let net = BlockNetwork::new(3, spec, 2, 10.0, 3).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(&batch());
            let bound = bind_blocks(&mut tape, net.blocks());
            let y = forward_bound(
                &mut tape,
                x,
                &bound,
                true,
                Some(Dropout { rate: 0.5, rng: &mut rng }),
            )
            .unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = small_net(5);
        let mut tape = Tape::new();
        let x = tape.constant(&batch());
        let bound = bind_blocks(&mut tape, net.blocks());
        let y = forward_bound(&mut tape, x, &bound, true, None).unwrap();
        assert_eq!(tape.value(y), net.forward_base(&batch()).unwrap().data());
    }

    #[test]
    fn novel_stream_requires_duplication() {
        let net = small_net(2);
        assert!(matches!(net.forward_novel(&batch()), Err(Error::State(_))));
        assert!(matches!(net.scores_two_stream(&batch()), Err(Error::State(_))));
    }

    #[test]
    fn duplication_copies_exactly_and_leaves_base_untouched() {
        let mut net = small_net(2);
        let before = net.base_checksum();
        net.duplicate_top_blocks(1).unwrap();
        assert_eq!(before, net.base_checksum());
        let a = net.forward_base(&batch()).unwrap();
        let b = net.forward_novel(&batch()).unwrap();
        let max_diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert_eq!(max_diff, 0.0);
        assert!(net.verify_frozen().is_ok());
        assert!(!net.blocks()[0].layers[0].weight.requires_grad());
        assert!(net.novel_top().unwrap()[0].layers[0].weight.requires_grad());
    }

    #[test]
    fn duplication_range_checked() {
        let mut net = small_net(2);
        assert!(matches!(net.duplicate_top_blocks(3), Err(Error::Config(_))));
        assert!(matches!(net.duplicate_top_blocks(0), Err(Error::Config(_))));
        net.duplicate_top_blocks(2).unwrap();
        assert_eq!(net.bottom_blocks().len(), 1);
        assert!(matches!(net.duplicate_top_blocks(1), Err(Error::State(_))));
    }

    #[test]
    fn novel_update_changes_only_novel_stream() {
        let mut net = small_net(4);
        net.duplicate_top_blocks(1).unwrap();
        let base_before = net.forward_base(&batch()).unwrap();
        net.novel_top_mut().unwrap()[0].layers[0].bias.data_mut()[0] += 0.5;
        assert_eq!(net.forward_base(&batch()).unwrap(), base_before);
        assert_ne!(net.forward_novel(&batch()).unwrap(), base_before);
        assert!(net.verify_frozen().is_ok());
        net.blocks_mut()[0].layers[0].bias.data_mut()[0] += 1e-9;
        assert!(matches!(net.verify_frozen(), Err(Error::Invariant(_))));
    }

    #[test]
    fn two_stream_layout_and_range() {
        let mut net = small_net(6);
        net.duplicate_top_blocks(1).unwrap();
        net.set_novel_weights(Tensor::from_columns(&[vec![1.0, 0.0, 0.0, 0.5]]).unwrap())
            .unwrap();
        let s = net.scores_two_stream(&batch()).unwrap();
        assert_eq!(s.shape(), &[3, 5]);
        assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(s.select_rows(&[0]).unwrap().data()[..4], net.base_scores(&batch()).unwrap().row(0)[..]);

        net.set_novel_weights(Tensor::zeros(vec![4, 0])).unwrap();
        assert_eq!(net.scores_two_stream(&batch()).unwrap(), net.base_scores(&batch()).unwrap());
    }

    #[test]
    fn spec_validation() {
        assert!(BlockSpec { blocks: vec![], ..Default::default() }.validate().is_err());
        assert!(BlockSpec { dropout_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(BlockSpec { blocks: vec![vec![4]], dropout_rate: 0.5, n_top: 1 }.validate().is_err());
    }
}
