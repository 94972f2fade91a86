//! `geofew`: scripted runs over the few-shot pipeline.
//!
//! Exit codes: 0 success, 1 invariant breach, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use geofew::checkpoint;
use geofew::config::RunConfig;
use geofew::datasets::{self, CsvSchema, LabeledDataset, Split};
use geofew::evaluation::{
    accuracy_on_split, aggregate_results, cosine_diagnostics, evaluate_episodes, results_csv, sample_episodes,
    EpisodeMode, EpisodeResult, Prior,
};
use geofew::model::BlockNetwork;
use geofew::pipeline;
use geofew::training::write_history_jsonl;
use geofew::Error;

#[derive(Parser)]
#[command(name = "geofew", version, about = "Few-shot fine-tuning with geometric constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Finetune,
    Ablation,
}

impl From<Mode> for EpisodeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Finetune => EpisodeMode::Finetune,
            Mode::Ablation => EpisodeMode::Ablation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic blob dataset as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the base network and write a checkpoint.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
    },
    /// Episodic evaluation of a stage-1 checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `episodes` of the config.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum, default_value = "finetune")]
        mode: Mode,
        /// Base prior p_base; the novel prior is 1 - p_base.
        #[arg(long)]
        prior: Option<f64>,
        /// Worker threads for the episode fan-out.
        #[arg(long)]
        jobs: Option<usize>,
        /// Report JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-episode CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fine-tune over a growing shot schedule, reporting every stage.
    Incremental {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated, strictly increasing shot counts.
        #[arg(long, default_value = "1,2,5,10,20")]
        schedule: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine structure of stage-1 features plus an embedding dump.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Supplies the base/novel split; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Summary JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Embedding CSV; defaults to `<checkpoint>.embeddings.csv`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Invariant(_)
        | Error::NonFinite(_)
        | Error::Shape { .. }
        | Error::Degenerate { .. }
        | Error::Domain { .. }
        | Error::State(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> geofew::Result<()> {
    match cmd {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::TrainBase {
            config,
            data,
            out_checkpoint,
        } => train_base(&config, &data, &out_checkpoint),
        Command::Evaluate {
            checkpoint,
            config,
            data,
            episodes,
            mode,
            prior,
            jobs,
            out,
            csv,
        } => evaluate(EvaluateArgs {
            checkpoint,
            config,
            data,
            episodes,
            mode: mode.into(),
            prior,
            jobs,
            out,
            csv,
        }),
        Command::Incremental {
            checkpoint,
            config,
            data,
            schedule,
            episodes,
            jobs,
            out,
        } => incremental(&checkpoint, &config, data.as_deref(), &schedule, episodes, jobs, out.as_deref()),
        Command::Diagnose {
            checkpoint,
            data,
            config,
            out,
            embeddings,
        } => diagnose(&checkpoint, &data, config.as_deref(), out.as_deref(), embeddings.as_deref()),
    }
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> geofew::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_data(cfg: &RunConfig, path: Option<&Path>) -> geofew::Result<(LabeledDataset, LabeledDataset)> {
    match path {
        Some(p) => pipeline::split_views(cfg, &datasets::load_csv(p, &CsvSchema::default())?),
        None => pipeline::synthetic_views(cfg),
    }
}

fn load_checkpoint(path: &Path, base: &LabeledDataset) -> geofew::Result<(BlockNetwork, checkpoint::CheckpointHeader)> {
    let (net, header) = checkpoint::load(path)?;
    if net.is_duplicated() {
        return Err(Error::Contract("expected a stage-1 checkpoint without a novel stream".into()));
    }
    if net.input_dim() != base.dim() || net.classifier.n_base() != base.categories().len() {
        return Err(Error::Contract(format!(
            "checkpoint expects {} inputs and {} base categories, data has {} and {}",
            net.input_dim(),
            net.classifier.n_base(),
            base.dim(),
            base.categories().len()
        )));
    }
    Ok((net, header))
}

fn checkpoint_info(path: &Path, net: &BlockNetwork, header: &checkpoint::CheckpointHeader) -> Value {
    json!({
        "path": path.display().to_string(),
        "config_hash": header.config_hash,
        "seed": header.seed,
        "base_checksum": net.base_checksum(),
    })
}

fn gen_data(config: &Path, out: &Path) -> geofew::Result<()> {
    let cfg = RunConfig::load(config)?;
    let means = datasets::blob_means(&cfg.data)?;
    let ds = datasets::generate_blobs(&cfg.data)?;
    datasets::save_csv(&ds, out)?;
    let counts = |s: Split| ds.indices_in(s).len();
    emit(
        &json!({
            "out": out.display().to_string(),
            "categories": ds.categories().len(),
            "dim": ds.dim(),
            "examples": {
                "train": counts(Split::Train),
                "val": counts(Split::Val),
                "test": counts(Split::Test),
            },
            "max_cosine_bound": cfg.data.max_cosine,
            "class_mean_max_cosine": datasets::max_pairwise_cosine(&means),
            "sample_mean_max_cosine": datasets::measured_mean_separation(&ds, None),
        }),
        None,
    )
}

fn train_base(config: &Path, data: &Path, out_checkpoint: &Path) -> geofew::Result<()> {
    let cfg = RunConfig::load(config)?;
    let (base, _) = load_data(&cfg, Some(data))?;
    let (net, history) = pipeline::train_base(&cfg, &base)?;
    checkpoint::save(out_checkpoint, &net, &cfg.hash(), cfg.seed)?;
    let history_path = cfg
        .outputs
        .history
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| sibling(out_checkpoint, "history.jsonl"));
    write_history_jsonl(&history_path, &history.steps)?;
    let val = history.epochs.last().and_then(|e| e.val_accuracy);
    emit(
        &json!({
            "checkpoint": out_checkpoint.display().to_string(),
            "history": history_path.display().to_string(),
            "config_hash": cfg.hash(),
            "steps": history.steps.len(),
            "epochs": history.epochs,
            "final_val_accuracy": val,
            "final_scale": history.final_scale,
            "base_checksum": net.base_checksum(),
        }),
        None,
    )
}

struct EvaluateArgs {
    checkpoint: PathBuf,
    config: PathBuf,
    data: Option<PathBuf>,
    episodes: Option<usize>,
    mode: EpisodeMode,
    prior: Option<f64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
}

fn evaluate(args: EvaluateArgs) -> geofew::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(n) = args.episodes {
        cfg.episodes = n;
    }
    if let Some(p) = args.prior {
        cfg.prior = Prior::from_base(p)?;
    }
    cfg.validate()?;
    let (base, pool) = load_data(&cfg, args.data.as_deref())?;
    let (net, header) = load_checkpoint(&args.checkpoint, &base)?;
    let checksum = net.base_checksum();
    let stage1_base = accuracy_on_split(&net, &base, Split::Test)?;
    let episodes = sample_episodes(&pool, &base, &cfg.episode, cfg.episodes, cfg.seed)?;
    let outcomes = evaluate_episodes(&net, &base, &pool, &episodes, args.mode, &cfg.eval_settings(), args.jobs)?;
    if net.base_checksum() != checksum {
        return Err(Error::Invariant("stage-1 snapshot changed during evaluation".into()));
    }
    let results: Vec<EpisodeResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    if let Some(r) = results.iter().find(|r| r.acc_base != stage1_base) {
        return Err(Error::Invariant(format!(
            "base accuracy moved from {stage1_base} to {} in episode {}",
            r.acc_base, r.seed
        )));
    }
    let csv_path = args.csv.or_else(|| cfg.outputs.results_csv.clone().map(PathBuf::from));
    if let Some(p) = &csv_path {
        std::fs::write(p, results_csv(&results))?;
    }
    emit(
        &json!({
            "config": cfg,
            "config_hash": cfg.hash(),
            "checkpoint": checkpoint_info(&args.checkpoint, &net, &header),
            "mode": args.mode,
            "prior": cfg.prior,
            "stage1_base_accuracy": stage1_base,
            "aggregate": aggregate_results(&results)?,
            "episodes": outcomes,
        }),
        args.out.as_deref(),
    )
}

fn incremental(
    checkpoint_path: &Path,
    config: &Path,
    data: Option<&Path>,
    schedule: &str,
    episodes: Option<usize>,
    jobs: Option<usize>,
    out: Option<&Path>,
) -> geofew::Result<()> {
    let schedule = pipeline::parse_schedule(schedule)?;
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = episodes {
        cfg.episodes = n;
    }
    cfg.validate()?;
    let (base, pool) = load_data(&cfg, data)?;
    let (net, header) = load_checkpoint(checkpoint_path, &base)?;
    let eps = pipeline::schedule_episodes(&cfg, &base, &pool, &schedule)?;
    let runs = pipeline::incremental_episodes(&cfg, &net, &base, &pool, &eps, &schedule, jobs)?;
    let mut stages = Vec::with_capacity(schedule.len());
    for (t, &k) in schedule.iter().enumerate() {
        let results: Vec<EpisodeResult> = runs.iter().map(|r| r[t].metrics.clone()).collect();
        stages.push(json!({
            "shots": k,
            "aggregate": aggregate_results(&results)?,
            "episodes": results,
        }));
    }
    emit(
        &json!({
            "config": cfg,
            "config_hash": cfg.hash(),
            "checkpoint": checkpoint_info(checkpoint_path, &net, &header),
            "schedule": schedule,
            "stages": stages,
        }),
        out,
    )
}

fn diagnose(
    checkpoint_path: &Path,
    data: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    embeddings: Option<&Path>,
) -> geofew::Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ds = datasets::load_csv(data, &CsvSchema::default())?;
    let (base, novel) = pipeline::split_views(&cfg, &ds)?;
    let (net, header) = load_checkpoint(checkpoint_path, &base)?;
    let diag = cosine_diagnostics(&net, &base, &novel)?;

    let dump_path = embeddings
        .map(Path::to_path_buf)
        .or_else(|| cfg.outputs.embeddings_csv.clone().map(PathBuf::from))
        .unwrap_or_else(|| sibling(checkpoint_path, "embeddings.csv"));
    let features = net.forward_base(&ds.tensor(&(0..ds.len()).collect::<Vec<_>>())?)?;
    std::fs::write(&dump_path, embedding_csv(&cfg, &ds, &features))?;

    emit(
        &json!({
            "checkpoint": checkpoint_info(checkpoint_path, &net, &header),
            "embeddings": dump_path.display().to_string(),
            "embedding_rows": ds.len(),
            "diagnostics": diag,
        }),
        out,
    )
}

fn embedding_csv(cfg: &RunConfig, ds: &LabeledDataset, features: &geofew::tensor::Tensor) -> String {
    use std::fmt::Write;
    let mut out = String::from("index,label,name,split,group");
    for j in 0..features.cols() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..ds.len() {
        let label = ds.label(i);
        let group = if cfg.split.base_ids.contains(&label) {
            "base"
        } else if cfg.split.novel_ids.contains(&label) {
            "novel"
        } else {
            "unused"
        };
        let split = match ds.split(i) {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let _ = write!(out, "{i},{label},{},{split},{group}", ds.registry()[&label]);
        for v in features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// `<path>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
