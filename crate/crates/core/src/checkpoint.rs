//! Checkpoint files: one line of JSON header, a newline, then every parameter
//! array as little-endian `f64` in the order the header lists them.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ScaleParameter;
use crate::model::{Block, BlockNetwork, BlockSpec, CosineClassifier, Linear};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub input_dim: usize,
    pub block_widths: Vec<Vec<usize>>,
    pub dropout_rate: f64,
    pub n_b: usize,
    pub n_n: usize,
    pub n_top: usize,
    pub d: usize,
    pub s: f64,
    pub config_hash: String,
    pub seed: u64,
    pub arrays: Vec<ArrayEntry>,
}

fn push_blocks<'a>(prefix: &str, blocks: &'a [Block], out: &mut Vec<(String, &'a Tensor)>) {
    for (b, block) in blocks.iter().enumerate() {
        for (l, layer) in block.layers.iter().enumerate() {
            out.push((format!("{prefix}{b}.layer{l}.weight"), &layer.weight));
            out.push((format!("{prefix}{b}.layer{l}.bias"), &layer.bias));
        }
    }
}

fn named_tensors(net: &BlockNetwork) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    push_blocks("block", net.blocks(), &mut out);
    out.push(("classifier.base".into(), &net.classifier.base));
    if let Some(top) = net.novel_top() {
        push_blocks("novel_top", top, &mut out);
    }
    if let Some(w) = &net.classifier.novel {
        out.push(("classifier.novel".into(), w));
    }
    out
}

pub fn to_bytes(net: &BlockNetwork, config_hash: &str, seed: u64) -> Result<Vec<u8>> {
    let tensors = named_tensors(net);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        input_dim: net.input_dim(),
        block_widths: net.spec().blocks.clone(),
        dropout_rate: net.spec().dropout_rate,
        n_b: net.classifier.n_base(),
        n_n: net.classifier.n_novel(),
        n_top: net.spec().n_top,
        d: net.feature_dim(),
        s: net.classifier.scale.get(),
        config_hash: config_hash.to_string(),
        seed,
        arrays: tensors
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(path: &Path, net: &BlockNetwork, config_hash: &str, seed: u64) -> Result<()> {
    let bytes = to_bytes(net, config_hash, seed)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(BlockNetwork, CheckpointHeader)> {
    from_bytes(&std::fs::read(path)?)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Parse {
        line: 1,
        message: format!("checkpoint: {}", msg.into()),
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(BlockNetwork, CheckpointHeader)> {
    let split = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| corrupt("missing header line"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format_version {}", header.format_version)));
    }
    let mut body = &bytes[split + 1..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let n: usize = entry.shape.iter().product();
        let need = n * 8;
        if body.len() < need {
            return Err(corrupt(format!("array {} truncated", entry.name)));
        }
        let data = body[..need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        body = &body[need..];
        arrays.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    if !body.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", body.len())));
    }

    let mut it = arrays.into_iter();
    let mut next = |expect: &str| -> Result<Tensor> {
        match it.next() {
            Some((name, t)) if name == expect => Ok(t),
            Some((name, _)) => Err(corrupt(format!("expected array {expect}, found {name}"))),
            None => Err(corrupt(format!("missing array {expect}"))),
        }
    };
    let read_blocks = |prefix: &str, widths: &[Vec<usize>], next: &mut dyn FnMut(&str) -> Result<Tensor>| {
        widths
            .iter()
            .enumerate()
            .map(|(b, ws)| {
                let layers = (0..ws.len())
                    .map(|l| {
                        Ok(Linear {
                            weight: next(&format!("{prefix}{b}.layer{l}.weight"))?,
                            bias: next(&format!("{prefix}{b}.layer{l}.bias"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Block { layers })
            })
            .collect::<Result<Vec<_>>>()
    };
    let blocks = read_blocks("block", &header.block_widths, &mut next)?;
    let base = next("classifier.base")?;
    let n_blocks = header.block_widths.len();
    let has_novel_stream = header.arrays.iter().any(|a| a.name.starts_with("novel_top"));
    let novel_top = if has_novel_stream {
        if header.n_top == 0 || header.n_top >= n_blocks {
            return Err(corrupt(format!("n_top {} inconsistent with {n_blocks} blocks", header.n_top)));
        }
        Some(read_blocks("novel_top", &header.block_widths[n_blocks - header.n_top..], &mut next)?)
    } else {
        None
    };
    let novel = if header.arrays.iter().any(|a| a.name == "classifier.novel") {
        Some(next("classifier.novel")?.with_requires_grad(true))
    } else {
        None
    };
    let classifier = CosineClassifier {
        base,
        novel,
        scale: ScaleParameter::new(header.s, true)?,
    };
    let spec = BlockSpec {
        blocks: header.block_widths.clone(),
        dropout_rate: header.dropout_rate,
        n_top: header.n_top,
    };
    let n_top = if novel_top.is_some() { header.n_top } else { 0 };
    let mut net = BlockNetwork::from_parts(header.input_dim, spec, blocks, n_top, novel_top, classifier)?;
    if !net.is_duplicated() {
        // stage-1 snapshot: every parameter trainable again
        net = net.base_only();
    }
    if net.classifier.n_base() != header.n_b || net.classifier.n_novel() != header.n_n || net.feature_dim() != header.d {
        return Err(corrupt("header dimensions disagree with stored arrays"));
    }
    Ok((net, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> BlockNetwork {
        let spec = BlockSpec {
            blocks: vec![vec![5], vec![4, 3]],
            dropout_rate: 0.25,
            n_top: 1,
        };
        BlockNetwork::new(2, spec, 3, 10.0, 9).unwrap()
    }

    #[test]
    fn stage1_round_trip_is_byte_exact() {
        let mut n = net();
        n.classifier.scale.tensor_mut().data_mut()[0] = 13.712345678901234;
        let bytes = to_bytes(&n, "abc", 42).unwrap();
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(header.seed, 42);
        assert_eq!(to_bytes(&back, "abc", 42).unwrap(), bytes);
        assert_eq!(back.classifier.scale.get(), 13.712345678901234);
    }

    #[test]
    fn stage2_round_trip_is_byte_exact() {
        let mut n = net();
        n.duplicate_top_blocks(1).unwrap();
        n.set_novel_weights(Tensor::from_columns(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]).unwrap())
            .unwrap();
        let bytes = to_bytes(&n, "h", 1).unwrap();
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(header.n_n, 2);
        assert_eq!(back.base_checksum(), n.base_checksum());
        assert_eq!(to_bytes(&back, "h", 1).unwrap(), bytes);
    }

    #[test]
    fn truncated_or_padded_files_fail() {
        let bytes = to_bytes(&net(), "h", 1).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        assert!(from_bytes(b"not a checkpoint").is_err());
    }
}
