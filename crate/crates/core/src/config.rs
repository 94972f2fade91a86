//! One JSON document describing a whole run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::datasets::BlobSpec;
use crate::error::{Error, Result};
use crate::evaluation::{EpisodeConfig, EvalSettings, Prior};
use crate::losses::LossConfig;
use crate::model::BlockSpec;
use crate::optim::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub base_ids: Vec<usize>,
    pub novel_ids: Vec<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            base_ids: (0..10).collect(),
            novel_ids: (10..20).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Stage-1 JSONL history; defaults to `<checkpoint>.history.jsonl`.
    pub history: Option<String>,
    /// Per-episode CSV written next to the report.
    pub results_csv: Option<String>,
    /// Embedding dump of `diagnose`.
    pub embeddings_csv: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: BlobSpec,
    pub split: SplitConfig,
    pub network: BlockSpec,
    pub stage1: OptimizerConfig,
    pub stage2: OptimizerConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub episode: EpisodeConfig,
    pub episodes: usize,
    pub prior: Prior,
    pub outputs: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            // within-class noise loose enough that stage 2 has errors to fix
            data: BlobSpec {
                noise_sigma: 0.2,
                ..BlobSpec::default()
            },
            split: SplitConfig::default(),
            network: BlockSpec {
                n_top: 2,
                ..BlockSpec::default()
            },
            stage1: OptimizerConfig {
                lr_extractor: 1e-3,
                lr_classifier: 1e-2,
                epochs: 6,
                batch_size: 100,
                ..OptimizerConfig::default()
            },
            stage2: OptimizerConfig {
                lr_extractor: 1e-3,
                lr_classifier: 1e-2,
                iterations: 300,
                ..OptimizerConfig::default()
            },
            loss: LossConfig::default(),
            // jitter on the scale of the within-class noise
            augmentation: AugmentationConfig {
                jitter_sigma: 0.2,
                ..AugmentationConfig::default()
            },
            episode: EpisodeConfig::default(),
            episodes: 20,
            prior: Prior::default(),
            outputs: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        self.episode.validate()?;
        self.prior.validate()?;
        if self.split.base_ids.is_empty() || self.split.novel_ids.is_empty() {
            return Err(Error::Config("split needs base and novel categories".into()));
        }
        let n_blocks = self.network.blocks.len();
        if self.network.n_top == 0 || self.network.n_top >= n_blocks {
            return Err(Error::Config(format!(
                "network.n_top must lie in [1, {}], got {}",
                n_blocks.saturating_sub(1),
                self.network.n_top
            )));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))[..16].to_string()
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            stage2: self.stage2.clone(),
            loss: self.loss.clone(),
            augmentation: self.augmentation.clone(),
            n_top: self.network.n_top,
            prior: self.prior,
        }
    }
}
