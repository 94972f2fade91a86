//! Run-level wiring from a [`RunConfig`]: data views, stage-1 training and
//! the episodic protocols.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::datasets::{generate_blobs, split_base_novel, LabeledDataset};
use crate::error::{Error, Result};
use crate::evaluation::{sample_episodes, score_episode, support_tensors, Episode, EpisodeConfig, EpisodeResult};
use crate::model::BlockNetwork;
use crate::training::{incremental_finetune, train_stage1, IncrementalStage, Stage1History};

/// Base view and novel pool of `ds` under the configured split.
pub fn split_views(cfg: &RunConfig, ds: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
    split_base_novel(ds, &cfg.split.base_ids, &cfg.split.novel_ids)
}

/// Generates the configured blobs and splits them.
pub fn synthetic_views(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    split_views(cfg, &generate_blobs(&cfg.data)?)
}

pub fn new_network(cfg: &RunConfig, input_dim: usize, n_base: usize) -> Result<BlockNetwork> {
    BlockNetwork::new(input_dim, cfg.network.clone(), n_base, cfg.loss.scale_init, cfg.seed)
}

/// Fresh network trained on the base view.
pub fn train_base(cfg: &RunConfig, base: &LabeledDataset) -> Result<(BlockNetwork, Stage1History)> {
    let mut net = new_network(cfg, base.dim(), base.categories().len())?;
    let history = train_stage1(&mut net, base, &cfg.stage1, &cfg.loss, cfg.seed)?;
    Ok((net, history))
}

/// Episodes with enough support for every stage of `schedule`.
pub fn schedule_episodes(
    cfg: &RunConfig,
    base: &LabeledDataset,
    pool: &LabeledDataset,
    schedule: &[usize],
) -> Result<Vec<Episode>> {
    let k = *schedule
        .last()
        .ok_or_else(|| Error::Contract("shot schedule must be nonempty".into()))?;
    let ep = EpisodeConfig {
        k_shot: k,
        ..cfg.episode.clone()
    };
    sample_episodes(pool, base, &ep, cfg.episodes, cfg.seed)
}

/// Incremental fine-tuning of one episode, scored after every stage on the
/// support available at that stage.
pub fn incremental_episode(
    cfg: &RunConfig,
    snapshot: &BlockNetwork,
    base: &LabeledDataset,
    pool: &LabeledDataset,
    episode: &Episode,
    schedule: &[usize],
) -> Result<Vec<IncrementalStage<EpisodeResult>>> {
    let support = support_tensors(pool, episode, None)?;
    let kind = cfg.loss.stage2_aggregate()?;
    let (_, stages) = incremental_finetune(
        snapshot,
        &support,
        pool.grid(),
        schedule,
        cfg.network.n_top,
        &cfg.stage2,
        &cfg.loss,
        &cfg.augmentation,
        episode.seed,
        |t, net| {
            let shots = support_tensors(pool, episode, Some(schedule[t]))?;
            score_episode(net, base, pool, episode, &shots, &cfg.prior, kind)
        },
    )?;
    Ok(stages
        .into_iter()
        .map(|mut s| {
            s.metrics.finetune_steps = s.history.steps.len();
            s.metrics.final_aws_active = s.history.steps.last().map(|r| r.aws_active);
            s
        })
        .collect())
}

/// [`incremental_episode`] over every episode; `jobs` caps the worker threads.
pub fn incremental_episodes(
    cfg: &RunConfig,
    snapshot: &BlockNetwork,
    base: &LabeledDataset,
    pool: &LabeledDataset,
    episodes: &[Episode],
    schedule: &[usize],
    jobs: Option<usize>,
) -> Result<Vec<Vec<IncrementalStage<EpisodeResult>>>> {
    let run = || {
        episodes
            .par_iter()
            .map(|e| incremental_episode(cfg, snapshot, base, pool, e, schedule))
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

/// Parses a comma-separated shot schedule such as `1,2,5,10,20`.
pub fn parse_schedule(text: &str) -> Result<Vec<usize>> {
    let schedule = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("schedule entry {:?} is not a nonnegative integer", p.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    if schedule.first() == Some(&0) {
        return Err(Error::Config("schedule entries must be positive".into()));
    }
    if let Some(w) = schedule.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!(
            "schedule must strictly increase, found {} then {}",
            w[0], w[1]
        )));
    }
    Ok(schedule)
}
