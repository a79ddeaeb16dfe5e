//! The `navgen` command line: dataset generation, training, evaluation,
//! policy comparison, token-entropy analysis, and offline scoring.
//!
//! Conventions shared by every subcommand:
//!
//! - outputs land in `--out DIR`; alongside the primary artifacts the run
//!   writes `run.json` with the fully resolved configuration, its content
//!   hash, and a hash of every produced file
//! - the `NAVGEN_SEED` environment variable overrides the configured seed
//! - `--jobs N` caps episode-level parallelism (0 = all cores); results are
//!   identical regardless
//! - exit codes: 0 success, 2 configuration error, 3 data error

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{
    build_dataset, load_dataset, save_dataset, DataConfig, Dataset, Episode, Flavor, Split,
};
use crate::error::{NavError, Result};
use crate::instructions::build_vocab;
use crate::learn::{save_train_log, train_from, ModelKind, TrainConfig, TrainedModel};
use crate::metrics::{
    agreement_curve, evaluate, precision_curve, rollout_and_evaluate, write_curve_csv,
    write_metrics_csv, write_metrics_json, CurveMode, EpisodeMetrics, MetricsReport,
    DEFAULT_SUCCESS_RADIUS,
};
use crate::models::{FollowerModel, ModelConfig, SpeakerModel, FOLLOWER_KIND, SPEAKER_KIND};
use crate::ndgrad::Checkpoint;
use crate::policies::{
    backtracking_rollout, default_max_steps, save_trajectories, load_trajectories,
    ActionSelector, BacktrackRules, CombinedSelector, DiscSelector, GenSelector, OracleSelector,
    Trajectory,
};
use crate::tent::{render_tent, tent_trace};
use crate::world::save_world;

const RUN_SCHEMA: &str = "navgen-run/1";

#[derive(Debug, Parser)]
#[command(
    name = "navgen",
    version,
    about = "Language-grounded navigation in synthetic graph worlds"
)]
pub struct Cli {
    /// Worker threads for episode-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate navigation worlds only.
    GenWorlds(GenDataArgs),
    /// Generate worlds plus episode manifests for every flavor and split.
    GenData(GenDataArgs),
    /// Train a follower or speaker model on a generated dataset.
    Train(TrainArgs),
    /// Roll a policy over a split and score the trajectories.
    Eval(EvalArgs),
    /// Run every policy variant on the same splits and tabulate them.
    Compare(CompareArgs),
    /// Emit token-wise prediction-entropy profiles for chosen episodes.
    Tent(TentArgs),
    /// Score an existing trajectory file against its dataset.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of extra single-leg training episodes to synthesize.
    #[arg(long)]
    pub augmented: Option<usize>,
    /// Generation seed (overrides the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training configuration JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to continue from instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Which model to train: follower or speaker.
    #[arg(long)]
    pub model: Option<String>,
    /// Episode flavor to train on: r2r or r4r.
    #[arg(long)]
    pub flavor: Option<String>,
    /// Supervision mode: supervised or fidelity.
    #[arg(long)]
    pub supervision: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Probability of following the student during mixed rollouts.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leading epochs that train on the augmented split as well.
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    /// Rollout step cap (defaults by flavor).
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Validation episodes scored per epoch (0 = all).
    #[arg(long)]
    pub val_cap: Option<usize>,
    /// Recurrent state width.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Token embedding width.
    #[arg(long)]
    pub token_embed: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Which action-selection rule an evaluation rolls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    /// Follower softmax scores.
    Disc,
    /// Speaker instruction-likelihood scores.
    Gen,
    /// Log-linear mix of both, weighted by beta.
    Combined,
    /// Combined scores plus revisit-triggered backtracking.
    #[value(name = "combined-backtrack", alias = "combined+backtrack")]
    CombinedBacktrack,
    /// Reference-path teacher (sanity checks and score fixtures).
    Oracle,
}

impl Policy {
    fn label(self) -> &'static str {
        match self {
            Policy::Disc => "disc",
            Policy::Gen => "gen",
            Policy::Combined => "combined",
            Policy::CombinedBacktrack => "combined_backtrack",
            Policy::Oracle => "oracle",
        }
    }

    fn needs_follower(self) -> bool {
        matches!(self, Policy::Disc | Policy::Combined | Policy::CombinedBacktrack)
    }

    fn needs_speaker(self) -> bool {
        matches!(self, Policy::Gen | Policy::Combined | Policy::CombinedBacktrack)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Follower checkpoint (required for disc/combined policies).
    #[arg(long)]
    pub follower: Option<PathBuf>,
    /// Speaker checkpoint (required for gen/combined policies).
    #[arg(long)]
    pub speaker: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Policy::Combined)]
    pub policy: Policy,
    /// Generative weight in the combined score.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Success distance threshold.
    #[arg(long, alias = "d-th", default_value_t = DEFAULT_SUCCESS_RADIUS)]
    pub radius: f64,
    /// Rollout step cap (0 = default for the flavor).
    #[arg(long, default_value_t = 0)]
    pub max_steps: usize,
    #[arg(long, default_value = "val_seen")]
    pub split: String,
    #[arg(long, default_value = "r2r")]
    pub flavor: String,
    /// Evaluate only the first N episodes (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    /// Reserved for stochastic policies; greedy rollouts ignore it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Follower checkpoint.
    #[arg(long)]
    pub follower: PathBuf,
    /// Speaker checkpoint.
    #[arg(long)]
    pub speaker: PathBuf,
    /// Generative weight in the combined score.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Success distance threshold.
    #[arg(long, alias = "d-th", default_value_t = DEFAULT_SUCCESS_RADIUS)]
    pub radius: f64,
    /// Rollout step cap (0 = default for the flavor).
    #[arg(long, default_value_t = 0)]
    pub max_steps: usize,
    /// Comma-separated splits to evaluate.
    #[arg(long, default_value = "val_seen,val_unseen")]
    pub splits: String,
    #[arg(long, default_value = "r2r")]
    pub flavor: String,
    /// Evaluate only the first N episodes per split (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    /// Episodes per split used for the behavioral curves (0 = all).
    #[arg(long, default_value_t = 40)]
    pub curve_episodes: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TentArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Speaker checkpoint (computes the entropies; always required).
    #[arg(long)]
    pub speaker: PathBuf,
    /// Follower checkpoint (for disc/combined rollout policies).
    #[arg(long)]
    pub follower: Option<PathBuf>,
    /// Policy that drives the analyzed rollout.
    #[arg(long, value_enum, default_value_t = Policy::Gen)]
    pub policy: Policy,
    /// Generative weight in the combined score.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Rollout step cap (0 = default for the flavor).
    #[arg(long, default_value_t = 0)]
    pub max_steps: usize,
    #[arg(long, default_value = "val_seen")]
    pub split: String,
    #[arg(long, default_value = "r2r")]
    pub flavor: String,
    /// Specific episode ids (repeatable). Defaults to the first `--count`.
    #[arg(long = "episode")]
    pub episodes: Vec<String>,
    /// How many episodes to trace when no ids are given.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output directory (one subdirectory per episode).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Dataset directory produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Trajectory JSONL file produced by `eval` (or compatible).
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Success distance threshold.
    #[arg(long, alias = "d-th", default_value_t = DEFAULT_SUCCESS_RADIUS)]
    pub radius: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse the CLI and run it, translating every failure into the documented
/// process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and exit 0; usage errors hit
            // stderr and exit 2.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Execute one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    crate::par::configure_jobs(cli.jobs);
    match cli.command {
        Command::GenWorlds(args) => gen_worlds(&args),
        Command::GenData(args) => gen_data(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Tent(args) => cmd_tent(&args),
        Command::Score(args) => cmd_score(&args),
    }
}

// ============================================================================
// Shared plumbing
// ============================================================================

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NavError::Config(msg.into()))
}

/// `NAVGEN_SEED`, if set, beats both config files and flags.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("NAVGEN_SEED") {
        Ok(text) => {
            let seed = text.parse::<u64>().map_err(|_| {
                NavError::Config(format!("NAVGEN_SEED must be an unsigned integer, got {text:?}"))
            })?;
            Ok(Some(seed))
        }
        Err(_) => Ok(None),
    }
}

/// Parse one of the snake_case enum names shared with the JSON configs
/// (splits, flavors, model kinds, ...).
fn parse_key<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| NavError::Config(format!("unknown {what}: {s:?}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

#[derive(Debug, Serialize)]
struct RunStamp {
    schema: String,
    command: String,
    /// The fully resolved configuration the run executed with.
    config: serde_json::Value,
    /// Content hash of the resolved configuration.
    config_hash: String,
    /// Content hash of every artifact the run wrote, by relative path.
    outputs: BTreeMap<String, String>,
}

/// Hash every file under `dir` (except `run.json` itself) and write the
/// stamp. Called after a command has produced all of its artifacts.
fn write_run_stamp(dir: &Path, command: &str, config: serde_json::Value) -> Result<()> {
    let mut outputs = BTreeMap::new();
    hash_tree(dir, dir, &mut outputs)?;
    let encoded = serde_json::to_string(&config)?;
    let stamp = RunStamp {
        schema: RUN_SCHEMA.to_string(),
        command: command.to_string(),
        config,
        config_hash: sha256_hex(encoded.as_bytes()),
        outputs,
    };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&stamp)?)?;
    Ok(())
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> =
        std::fs::read_dir(dir)?.collect::<std::result::Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            hash_tree(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| NavError::Data(format!("walk escaped {}", root.display())))?
                .to_string_lossy()
                .replace('\\', "/");
            if rel == "run.json" {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

fn load_data_config(args: &GenDataArgs) -> Result<DataConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| NavError::Data(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str::<DataConfig>(&text)
                .map_err(|e| NavError::Config(format!("parsing {}: {e}", path.display())))?
        }
        None => DataConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_follower(path: &Path, dataset: &Dataset) -> Result<FollowerModel> {
    let ckpt = checkpoint_for(path, FOLLOWER_KIND, dataset)?;
    FollowerModel::from_checkpoint(&ckpt)
}

fn load_speaker(path: &Path, dataset: &Dataset) -> Result<SpeakerModel> {
    let ckpt = checkpoint_for(path, SPEAKER_KIND, dataset)?;
    SpeakerModel::from_checkpoint(&ckpt)
}

fn checkpoint_for(path: &Path, kind: &str, dataset: &Dataset) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != kind {
        return Err(NavError::Data(format!(
            "{}: checkpoint holds a {:?} model, expected {kind:?}",
            path.display(),
            ckpt.kind
        )));
    }
    if ckpt.vocab_hash != dataset.manifest.vocab_hash {
        return Err(NavError::Data(format!(
            "{}: checkpoint vocabulary does not match the dataset",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn select_episodes(
    dataset: &Dataset,
    flavor: Flavor,
    split: Split,
    limit: usize,
) -> Result<Vec<Episode>> {
    let mut episodes: Vec<Episode> =
        dataset.select(flavor, split).into_iter().cloned().collect();
    if episodes.is_empty() {
        return Err(NavError::Data(format!(
            "dataset has no {flavor:?} episodes in split {split:?}"
        )));
    }
    if limit > 0 {
        episodes.truncate(limit);
    }
    Ok(episodes)
}

fn print_mean(label: &str, episodes: usize, report: &MetricsReport) {
    let m = &report.mean;
    println!(
        "{label}: {episodes} episodes  PL {:.2}  NE {:.2}  SR {:.3}  SPL {:.3}  CLS {:.3}  nDTW {:.3}  SDTW {:.3}",
        m.pl, m.ne, m.sr, m.spl, m.cls, m.ndtw, m.sdtw
    );
}

// ============================================================================
// gen-worlds / gen-data
// ============================================================================

fn gen_worlds(args: &GenDataArgs) -> Result<()> {
    let cfg = load_data_config(args)?;
    let dataset = build_dataset(&cfg, args.augmented.unwrap_or(0))?;
    std::fs::create_dir_all(args.out.join("worlds"))?;
    for entry in &dataset.manifest.worlds {
        save_world(dataset.world(&entry.env_id)?, &args.out.join(&entry.file))?;
    }
    let listing = serde_json::json!({
        "schema": "navgen-worlds/1",
        "vocab_hash": dataset.manifest.vocab_hash,
        "worlds": dataset.manifest.worlds,
    });
    std::fs::write(
        args.out.join("worlds.json"),
        serde_json::to_string_pretty(&listing)?,
    )?;
    write_run_stamp(&args.out, "gen-worlds", serde_json::to_value(&cfg)?)?;
    println!(
        "wrote {} worlds to {}",
        dataset.manifest.worlds.len(),
        args.out.display()
    );
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = load_data_config(args)?;
    let augmented = args.augmented.unwrap_or(0);
    let dataset = build_dataset(&cfg, augmented)?;
    save_dataset(&dataset, &args.out)?;
    let mut config = serde_json::to_value(&cfg)?;
    config["augmented_count"] = serde_json::json!(augmented);
    write_run_stamp(&args.out, "gen-data", config)?;
    let counts: Vec<String> = dataset
        .manifest
        .splits
        .iter()
        .map(|s| format!("{:?}/{:?}: {}", s.flavor, s.split, s.episodes))
        .collect();
    println!(
        "wrote {} worlds, {} episodes to {} ({})",
        dataset.manifest.worlds.len(),
        dataset.episodes.len(),
        args.out.display(),
        counts.join(", ")
    );
    Ok(())
}

// ============================================================================
// train
// ============================================================================

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => {
            let model = args.model.as_deref().ok_or(NavError::Config(
                "either --config or --model is required".to_string(),
            ))?;
            TrainConfig {
                model: parse_key::<ModelKind>("model", model)?,
                model_cfg: default_model_cfg(&dataset)?,
                ..TrainConfig::default()
            }
        }
    };
    if args.config.is_some() {
        if let Some(model) = &args.model {
            cfg.model = parse_key("model", model)?;
        }
    }
    if let Some(v) = &args.flavor {
        cfg.flavor = parse_key("flavor", v)?;
    }
    if let Some(v) = &args.supervision {
        cfg.supervision = parse_key("supervision", v)?;
    }
    if let Some(v) = &args.optimizer {
        cfg.optimizer = parse_key("optimizer", v)?;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.eta {
        cfg.eta = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.phase1_epochs {
        cfg.phase1_epochs = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = args.val_cap {
        cfg.val_cap = v;
    }
    if let Some(v) = args.hidden {
        cfg.model_cfg.hidden = v;
    }
    if let Some(v) = args.token_embed {
        cfg.model_cfg.token_embed = v;
    }
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }

    let start = match &args.init {
        Some(path) => Some(match cfg.model {
            ModelKind::Follower => TrainedModel::Follower(load_follower(path, &dataset)?),
            ModelKind::Speaker => TrainedModel::Speaker(load_speaker(path, &dataset)?),
        }),
        None => None,
    };
    let outcome = train_from(&cfg, &dataset, start)?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt = outcome
        .model
        .to_checkpoint(&cfg, &dataset.manifest.vocab_hash)?;
    ckpt.save(&args.out.join("checkpoint.json"))?;
    save_train_log(&args.out.join("train_log.jsonl"), &outcome.log)?;
    let mut config = serde_json::to_value(&cfg)?;
    if let Some(path) = &args.init {
        config["init"] = serde_json::json!(path.to_string_lossy());
    }
    write_run_stamp(&args.out, "train", config)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {:?} for {} epochs: loss {:.4}, val SR {}",
            cfg.model,
            outcome.log.len(),
            last.mean_loss,
            last.val_sr
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "n/a".to_string())
        );
    }
    Ok(())
}

/// Model shape matched to the dataset: feature width from its worlds,
/// vocabulary from the shared tokenizer.
fn default_model_cfg(dataset: &Dataset) -> Result<ModelConfig> {
    let (_, graph) = dataset
        .worlds
        .first()
        .ok_or(NavError::Data("dataset has no worlds".to_string()))?;
    let d_v = graph.node(0)?.visual_feature.len();
    Ok(ModelConfig {
        d_v,
        vocab: build_vocab().len(),
        ..ModelConfig::default()
    })
}

// ============================================================================
// eval
// ============================================================================

/// The models an eval-style command loaded, per its policy's needs.
struct LoadedModels {
    follower: Option<FollowerModel>,
    speaker: Option<SpeakerModel>,
}

impl LoadedModels {
    fn load(
        policy: Policy,
        follower: Option<&PathBuf>,
        speaker: Option<&PathBuf>,
        dataset: &Dataset,
    ) -> Result<LoadedModels> {
        let follower = if policy.needs_follower() {
            let path = follower.ok_or(NavError::Config(format!(
                "policy {} requires --follower",
                policy.label()
            )))?;
            Some(load_follower(path, dataset)?)
        } else {
            None
        };
        let speaker = if policy.needs_speaker() {
            let path = speaker.ok_or(NavError::Config(format!(
                "policy {} requires --speaker",
                policy.label()
            )))?;
            Some(load_speaker(path, dataset)?)
        } else {
            None
        };
        Ok(LoadedModels { follower, speaker })
    }

    fn follower(&self) -> &FollowerModel {
        self.follower.as_ref().expect("follower checked at load")
    }

    fn speaker(&self) -> &SpeakerModel {
        self.speaker.as_ref().expect("speaker checked at load")
    }
}

/// Roll `policy` over `episodes` and score the result.
fn run_policy(
    policy: Policy,
    models: &LoadedModels,
    beta: f64,
    dataset: &Dataset,
    episodes: &[Episode],
    max_steps: usize,
    radius: f64,
) -> Result<(Vec<Trajectory>, MetricsReport)> {
    match policy {
        Policy::Disc => rollout_and_evaluate(
            || DiscSelector { follower: models.follower() },
            dataset,
            episodes,
            max_steps,
            radius,
        ),
        Policy::Gen => rollout_and_evaluate(
            || GenSelector { speaker: models.speaker() },
            dataset,
            episodes,
            max_steps,
            radius,
        ),
        Policy::Combined => rollout_and_evaluate(
            || CombinedSelector {
                speaker: models.speaker(),
                follower: models.follower(),
                beta,
            },
            dataset,
            episodes,
            max_steps,
            radius,
        ),
        Policy::CombinedBacktrack => {
            let rules = BacktrackRules::default();
            let runs = crate::par::ordered_map(episodes, |episode| -> Result<Trajectory> {
                let graph = dataset.world(&episode.env_id)?;
                let mut selector = CombinedSelector {
                    speaker: models.speaker(),
                    follower: models.follower(),
                    beta,
                };
                let (traj, _) =
                    backtracking_rollout(&mut selector, graph, episode, max_steps, &rules)?;
                Ok(traj)
            });
            let trajectories: Vec<Trajectory> = runs.into_iter().collect::<Result<_>>()?;
            let report = evaluate(dataset, &trajectories, radius)?;
            Ok((trajectories, report))
        }
        Policy::Oracle => rollout_and_evaluate(
            || OracleSelector,
            dataset,
            episodes,
            max_steps,
            radius,
        ),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.beta) {
        return config_err(format!("--beta must lie in [0, 1], got {}", args.beta));
    }
    if args.radius <= 0.0 {
        return config_err(format!("--radius must be positive, got {}", args.radius));
    }
    let dataset = load_dataset(&args.data)?;
    let flavor: Flavor = parse_key("flavor", &args.flavor)?;
    let split: Split = parse_key("split", &args.split)?;
    let episodes = select_episodes(&dataset, flavor, split, args.limit)?;
    let models = LoadedModels::load(
        args.policy,
        args.follower.as_ref(),
        args.speaker.as_ref(),
        &dataset,
    )?;
    let max_steps = if args.max_steps == 0 {
        default_max_steps(flavor)
    } else {
        args.max_steps
    };
    let (trajectories, report) = run_policy(
        args.policy,
        &models,
        args.beta,
        &dataset,
        &episodes,
        max_steps,
        args.radius,
    )?;
    std::fs::create_dir_all(&args.out)?;
    save_trajectories(&args.out.join("trajectories.jsonl"), &trajectories)?;
    write_metrics_json(&args.out.join("metrics.json"), &report)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &report)?;
    let config = serde_json::json!({
        "data": args.data.to_string_lossy(),
        "policy": args.policy.label(),
        "beta": args.beta,
        "radius": args.radius,
        "max_steps": max_steps,
        "split": args.split,
        "flavor": args.flavor,
        "limit": args.limit,
        "seed": args.seed,
    });
    write_run_stamp(&args.out, "eval", config)?;
    print_mean(
        &format!("{} {}", args.policy.label(), args.split),
        episodes.len(),
        &report,
    );
    Ok(())
}

// ============================================================================
// compare
// ============================================================================

#[derive(Debug, Serialize)]
struct ComparisonRow {
    split: String,
    policy: String,
    episodes: usize,
    pl: f64,
    ne: f64,
    sr: f64,
    spl: f64,
    cls: f64,
    ndtw: f64,
    sdtw: f64,
}

impl ComparisonRow {
    fn new(split: &str, policy: &str, episodes: usize, mean: &EpisodeMetrics) -> ComparisonRow {
        ComparisonRow {
            split: split.to_string(),
            policy: policy.to_string(),
            episodes,
            pl: mean.pl,
            ne: mean.ne,
            sr: mean.sr,
            spl: mean.spl,
            cls: mean.cls,
            ndtw: mean.ndtw,
            sdtw: mean.sdtw,
        }
    }
}

fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut text = String::from("split,policy,episodes,pl,ne,sr,spl,cls,ndtw,sdtw\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.split, r.policy, r.episodes, r.pl, r.ne, r.sr, r.spl, r.cls, r.ndtw, r.sdtw
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.beta) {
        return config_err(format!("--beta must lie in [0, 1], got {}", args.beta));
    }
    let dataset = load_dataset(&args.data)?;
    let flavor: Flavor = parse_key("flavor", &args.flavor)?;
    let splits: Vec<Split> = args
        .splits
        .split(',')
        .map(|s| parse_key("split", s.trim()))
        .collect::<Result<_>>()?;
    if splits.is_empty() {
        return config_err("--splits names no splits");
    }
    let follower = load_follower(&args.follower, &dataset)?;
    let speaker = load_speaker(&args.speaker, &dataset)?;
    let models = LoadedModels {
        follower: Some(follower),
        speaker: Some(speaker),
    };
    let max_steps = if args.max_steps == 0 {
        default_max_steps(flavor)
    } else {
        args.max_steps
    };
    let policies = [
        Policy::Disc,
        Policy::Gen,
        Policy::Combined,
        Policy::CombinedBacktrack,
    ];

    std::fs::create_dir_all(args.out.join("curves"))?;
    let mut rows = Vec::new();
    for &split in &splits {
        let episodes = select_episodes(&dataset, flavor, split, args.limit)?;
        let split_name = format!("{split:?}");
        let split_key = split_label(split);
        for &policy in &policies {
            let (trajectories, report) = run_policy(
                policy,
                &models,
                args.beta,
                &dataset,
                &episodes,
                max_steps,
                args.radius,
            )?;
            let tag = format!("{}_{}", split_key, policy.label());
            save_trajectories(&args.out.join(format!("trajectories_{tag}.jsonl")), &trajectories)?;
            write_metrics_json(&args.out.join(format!("metrics_{tag}.json")), &report)?;
            rows.push(ComparisonRow::new(
                split_key,
                policy.label(),
                episodes.len(),
                &report.mean,
            ));
            print_mean(&format!("{split_name} {}", policy.label()), episodes.len(), &report);
        }

        // Behavioral curves: per-step teacher precision for each base
        // policy, and cross-policy agreement, on gold and rolled states.
        let curve_eps: Vec<Episode> = episodes
            .iter()
            .take(if args.curve_episodes == 0 {
                episodes.len()
            } else {
                args.curve_episodes
            })
            .cloned()
            .collect();
        for (mode, mode_key) in [
            (CurveMode::OnReference, "reference"),
            (CurveMode::OwnRollout, "rollout"),
        ] {
            let disc = precision_curve(
                || DiscSelector { follower: models.follower() },
                &dataset,
                &curve_eps,
                mode,
                max_steps,
            )?;
            write_curve_csv(
                &args.out.join(format!("curves/{split_key}_precision_disc_{mode_key}.csv")),
                &disc,
            )?;
            let gen = precision_curve(
                || GenSelector { speaker: models.speaker() },
                &dataset,
                &curve_eps,
                mode,
                max_steps,
            )?;
            write_curve_csv(
                &args.out.join(format!("curves/{split_key}_precision_gen_{mode_key}.csv")),
                &gen,
            )?;
            let agree = agreement_curve(
                || DiscSelector { follower: models.follower() },
                || GenSelector { speaker: models.speaker() },
                &dataset,
                &curve_eps,
                mode,
                max_steps,
            )?;
            write_curve_csv(
                &args.out.join(format!("curves/{split_key}_agreement_{mode_key}.csv")),
                &agree,
            )?;
        }
    }

    write_comparison_csv(&args.out.join("comparison.csv"), &rows)?;
    std::fs::write(
        args.out.join("comparison.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "schema": "navgen-comparison/1",
            "radius": args.radius,
            "beta": args.beta,
            "rows": rows,
        }))?,
    )?;
    let config = serde_json::json!({
        "data": args.data.to_string_lossy(),
        "beta": args.beta,
        "radius": args.radius,
        "max_steps": max_steps,
        "splits": args.splits,
        "flavor": args.flavor,
        "limit": args.limit,
        "curve_episodes": args.curve_episodes,
    });
    write_run_stamp(&args.out, "compare", config)?;
    Ok(())
}

fn split_label(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::ValSeen => "val_seen",
        Split::ValUnseen => "val_unseen",
    }
}

// ============================================================================
// tent
// ============================================================================

/// A selector the tent command can drive a rollout with, chosen at runtime.
enum AnySelector<'m> {
    Disc(DiscSelector<'m>),
    Gen(GenSelector<'m>),
    Combined(CombinedSelector<'m>),
    Oracle(OracleSelector),
}

impl ActionSelector for AnySelector<'_> {
    fn log_scores(&mut self, ctx: &crate::policies::StepContext) -> Result<Vec<f64>> {
        match self {
            AnySelector::Disc(s) => s.log_scores(ctx),
            AnySelector::Gen(s) => s.log_scores(ctx),
            AnySelector::Combined(s) => s.log_scores(ctx),
            AnySelector::Oracle(s) => s.log_scores(ctx),
        }
    }
}

fn cmd_tent(args: &TentArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let flavor: Flavor = parse_key("flavor", &args.flavor)?;
    let split: Split = parse_key("split", &args.split)?;
    // The speaker that computes entropies also serves gen-flavored
    // policies; disc and combined need the follower too.
    let speaker = load_speaker(&args.speaker, &dataset)?;
    let follower = if args.policy.needs_follower() {
        let path = args.follower.as_ref().ok_or(NavError::Config(format!(
            "policy {} requires --follower",
            args.policy.label()
        )))?;
        Some(load_follower(path, &dataset)?)
    } else {
        None
    };

    let all = select_episodes(&dataset, flavor, split, 0)?;
    let chosen: Vec<Episode> = if args.episodes.is_empty() {
        all.into_iter().take(args.count.max(1)).collect()
    } else {
        let mut picked = Vec::new();
        for id in &args.episodes {
            let ep = all
                .iter()
                .find(|e| &e.episode_id == id)
                .ok_or_else(|| {
                    NavError::Data(format!("episode {id:?} not found in {}/{}", args.flavor, args.split))
                })?;
            picked.push(ep.clone());
        }
        picked
    };
    let max_steps = if args.max_steps == 0 {
        default_max_steps(flavor)
    } else {
        args.max_steps
    };

    std::fs::create_dir_all(&args.out)?;
    for episode in &chosen {
        let graph = dataset.world(&episode.env_id)?;
        let mut selector = match args.policy {
            Policy::Disc => AnySelector::Disc(DiscSelector {
                follower: follower.as_ref().expect("checked above"),
            }),
            Policy::Gen => AnySelector::Gen(GenSelector { speaker: &speaker }),
            Policy::Combined | Policy::CombinedBacktrack => {
                AnySelector::Combined(CombinedSelector {
                    speaker: &speaker,
                    follower: follower.as_ref().expect("checked above"),
                    beta: args.beta,
                })
            }
            Policy::Oracle => AnySelector::Oracle(OracleSelector),
        };
        let profiles = tent_trace(&speaker, graph, episode, &mut selector, max_steps)?;
        let dir = args.out.join(&episode.episode_id);
        render_tent(&profiles, &dir)?;
        println!(
            "{}: {} decisions, {} tokens -> {}",
            episode.episode_id,
            profiles.len(),
            profiles.first().map(|p| p.tokens.len()).unwrap_or(0),
            dir.display()
        );
    }
    let config = serde_json::json!({
        "data": args.data.to_string_lossy(),
        "policy": args.policy.label(),
        "beta": args.beta,
        "max_steps": max_steps,
        "split": args.split,
        "flavor": args.flavor,
        "episodes": chosen.iter().map(|e| e.episode_id.clone()).collect::<Vec<_>>(),
    });
    write_run_stamp(&args.out, "tent", config)?;
    Ok(())
}

// ============================================================================
// score
// ============================================================================

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    if args.radius <= 0.0 {
        return config_err(format!("--radius must be positive, got {}", args.radius));
    }
    let dataset = load_dataset(&args.data)?;
    let trajectories = load_trajectories(&args.trajectories)?;
    let report = evaluate(&dataset, &trajectories, args.radius)?;
    std::fs::create_dir_all(&args.out)?;
    write_metrics_json(&args.out.join("metrics.json"), &report)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &report)?;
    let config = serde_json::json!({
        "data": args.data.to_string_lossy(),
        "trajectories": args.trajectories.to_string_lossy(),
        "radius": args.radius,
    });
    write_run_stamp(&args.out, "score", config)?;
    print_mean("score", report.episodes.len(), &report);
    Ok(())
}
