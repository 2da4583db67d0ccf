//! Command-line front end: `decompose`, `verify`, `init`, `pretrain`,
//! `finetune`, `sweep` and `analyze`.
//!
//! Every successful command writes a `manifest.json` describing the resolved
//! configuration next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::adapter::{adapter_config_from_store, count_layers, AdapterConfig, AdapterScheme, Projection, Ranks};
use crate::analysis::{delta_norms, forgetting_loss, subspace_similarity, Report};
use crate::error::{Error, Result};
use crate::factorization::{reconstruct, split, LowRankSplit, SplitKind};
use crate::matrix::Matrix;
use crate::model::optim::TrainConfig;
use crate::model::task::{SynthTask, TaskKind};
use crate::model::train::{adapt, adapter_checkpoint, curves_csv, finetune, load_model, pretrain, restore_head, TrainOutcome};
use crate::model::ModelConfig;
use crate::store::TensorStore;

pub const DEFAULT_SEEDS: [u64; 5] = [11, 23, 37, 53, 71];
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const THREADS_ENV: &str = "AILORA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ailora", version, about = "Asymmetric low-rank adapter initialization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split weight tensors into balanced low-rank factors plus a residual.
    Decompose(DecomposeArgs),
    /// Check a decomposition against the original weights.
    Verify(VerifyArgs),
    /// Initialize adapters on a pretrained checkpoint without training.
    Init(InitArgs),
    /// Train a toy model from scratch.
    Pretrain(PretrainArgs),
    /// Finetune adapters on a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Finetune once per rank.
    Sweep(SweepArgs),
    /// Diagnostics over checkpoints.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value = "principal")]
    pub kind: String,
    /// Comma-separated name patterns; `*` matches any run, `?` one character.
    #[arg(long, default_value = "layer*.q,layer*.k,layer*.v,layer*.o")]
    pub tensors: String,
    /// Output TSR1 file; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub decomposition: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct AdapterArgs {
    #[arg(long, default_value = "ailora")]
    pub scheme: String,
    #[arg(long, default_value = "q=8,v=8")]
    pub ranks: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[arg(long, default_value_t = DEFAULT_SEEDS[0])]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
}

impl TrainArgs {
    fn resolve(&self, defaults: TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr.unwrap_or(defaults.learning_rate),
            betas: (self.beta1, self.beta2),
            weight_decay: self.weight_decay,
            epochs: self.epochs.unwrap_or(defaults.epochs),
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct TaskArgs {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    /// Seed of the synthetic data (kept fixed across training seeds).
    #[arg(long, default_value_t = 1234)]
    pub data_seed: u64,
}

impl TaskArgs {
    fn resolve(&self, default: TaskKind, model: &ModelConfig) -> Result<SynthTask> {
        let kind = self.task.as_deref().map(str::parse).transpose()?.unwrap_or(default);
        let task = SynthTask {
            kind,
            seq_len: model.max_seq,
            vocab: model.vocab,
            num_classes: model.num_classes,
            sample_count: self.samples,
            seed: self.data_seed,
        };
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = DEFAULT_SEEDS[0])]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: TaskArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: TaskArgs,
    #[arg(long, default_value_t = DEFAULT_SEEDS[0])]
    pub seed: u64,
    /// `all` for the five default seeds, or a comma-separated list. Each seed
    /// writes into `<out>/seed_<s>/`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "ailora")]
    pub scheme: String,
    /// Comma-separated ranks; each run writes into `<out>/rank_<r>/`.
    #[arg(long, default_value = "1,2,4,8,16,32")]
    pub ranks: String,
    #[arg(long, default_value = "q,v")]
    pub projections: String,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: TaskArgs,
    #[arg(long, default_value_t = DEFAULT_SEEDS[0])]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Per-layer subspace similarity φ between two checkpoints.
    Similarity(SimilarityArgs),
    /// Per-layer ‖W_ft − W_pre‖_F.
    DeltaNorms(DeltaNormArgs),
    /// Cross-entropy of finetuned predictions against pretrained ones.
    Forgetting(ForgettingArgs),
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    /// Subtract this dense checkpoint from `left` (ΔW of a full finetune).
    #[arg(long)]
    pub left_base: Option<PathBuf>,
    #[arg(long)]
    pub right_base: Option<PathBuf>,
    #[arg(long, default_value = "q")]
    pub proj: String,
    #[arg(long)]
    pub rank: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeltaNormArgs {
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Dense checkpoint or adapter checkpoint (merged before comparing).
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long, default_value = "q")]
    pub proj: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForgettingArgs {
    #[arg(long)]
    pub pretrained: PathBuf,
    #[arg(long)]
    pub finetuned: PathBuf,
    #[arg(long, default_value = "majority")]
    pub task: String,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 4321)]
    pub data_seed: u64,
    /// Classifier used for the finetuned side: the pretrained task head on
    /// the finetuned backbone, or the head saved with the finetune.
    #[arg(long, default_value = "pretrained")]
    pub head: HeadSource,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSource {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub duration_secs: f64,
}

struct ManifestBuilder {
    command: &'static str,
    started: Instant,
}

impl ManifestBuilder {
    fn start(command: &'static str) -> Self {
        Self { command, started: Instant::now() }
    }

    fn write(self, path: &Path, config: Value, seeds: Vec<u64>, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            config,
            seeds,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        fs::write(path, serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose(a) => cmd_decompose(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Init(a) => cmd_init(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Analyze(AnalyzeCommand::Similarity(a)) => cmd_similarity(&a),
        Command::Analyze(AnalyzeCommand::DeltaNorms(a)) => cmd_delta_norms(&a),
        Command::Analyze(AnalyzeCommand::Forgetting(a)) => cmd_forgetting(&a),
    }
}

/// Shell-style wildcard match supporting `*` and `?`.
pub fn wildcard_match(pattern: &str, name: &str) -> bool {
    let (p, n): (Vec<char>, Vec<char>) = (pattern.chars().collect(), name.chars().collect());
    let (mut pi, mut ni) = (0, 0);
    let mut backtrack: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == n[ni]) {
            pi += 1;
            ni += 1;
        } else if pi < p.len() && p[pi] == '*' {
            backtrack = Some((pi, ni));
            pi += 1;
        } else if let Some((bp, bn)) = backtrack {
            pi = bp + 1;
            ni = bn + 1;
            backtrack = Some((bp, bn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_decompose(a: &DecomposeArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("decompose");
    if a.rank == 0 {
        return Err(Error::Config("--rank must be at least 1".into()));
    }
    let kind: SplitKind = a.kind.parse()?;
    let weights = TensorStore::read(&a.weights)?;
    let patterns: Vec<&str> = a.tensors.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    let selected: Vec<(&str, &Matrix)> =
        weights.iter().filter(|(name, _)| patterns.iter().any(|p| wildcard_match(p, name))).collect();
    if selected.is_empty() {
        return Err(Error::Config(format!("no tensors match `{}`", a.tensors)));
    }
    let mut out = TensorStore::new();
    for (name, w) in &selected {
        let k = w.rows().min(w.cols());
        if a.rank > k {
            return Err(Error::Config(format!("rank {} exceeds min dimension {k} of `{name}`", a.rank)));
        }
        let s = split(w, a.rank, kind)?;
        out.insert(format!("{name}.a"), s.a)?;
        out.insert(format!("{name}.b"), s.b)?;
        out.insert(format!("{name}.residual"), s.residual)?;
    }
    out.set_meta("kind", kind.to_string());
    out.set_meta("rank", a.rank.to_string());
    out.write(&a.out)?;
    manifest.write(
        &manifest_beside(&a.out),
        json!({"rank": a.rank, "kind": kind, "tensors": selected.iter().map(|(n, _)| *n).collect::<Vec<_>>()}),
        vec![],
        &[&a.weights],
        &[&a.out],
    )
}

/// Largest relative reconstruction error over every decomposed tensor.
pub fn verify_decomposition(weights: &TensorStore, decomposition: &TensorStore) -> Result<(usize, f64)> {
    let rank: usize = decomposition
        .meta("rank")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::Config("decomposition lacks `rank` metadata".into()))?;
    let kind: SplitKind = decomposition.meta("kind").unwrap_or("principal").parse()?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for name in decomposition.names().filter_map(|n| n.strip_suffix(".residual")) {
        let take = |s: &str| decomposition.require(&format!("{name}.{s}")).cloned();
        let split = LowRankSplit { b: take("b")?, a: take("a")?, residual: take("residual")?, rank, kind };
        let w = weights.require(name)?;
        let err = reconstruct(&split).sub(w)?.frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE);
        worst = worst.max(if w.frobenius_norm() == 0.0 { reconstruct(&split).frobenius_norm() } else { err });
        checked += 1;
    }
    Ok((checked, worst))
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let (checked, worst) = verify_decomposition(&TensorStore::read(&a.weights)?, &TensorStore::read(&a.decomposition)?)?;
    println!("{}", json!({"tensors": checked, "max_relative_error": worst}));
    Ok(())
}

fn adapter_config(a: &AdapterArgs, seed: u64) -> Result<AdapterConfig> {
    let cfg = AdapterConfig::new(a.scheme.parse::<AdapterScheme>()?, a.ranks.parse::<Ranks>()?, a.alpha, seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_init(a: &InitArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("init");
    let cfg = adapter_config(&a.adapter, a.seed)?;
    let pretrained = TensorStore::read(&a.weights)?;
    let model = adapt(&pretrained, &cfg)?;
    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.tsr");
    adapter_checkpoint(&model, &cfg)?.write(&ckpt)?;
    manifest.write(&a.out.join("manifest.json"), serde_json::to_value(&cfg)?, vec![a.seed], &[&a.weights], &[&ckpt])
}

fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<(PathBuf, PathBuf)> {
    create_dir(dir)?;
    let ckpt = dir.join("checkpoint.tsr");
    let csv = dir.join("curves.csv");
    outcome.checkpoint.write(&ckpt)?;
    fs::write(&csv, curves_csv(&outcome.curve))?;
    Ok((ckpt, csv))
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("pretrain");
    let model_cfg = ModelConfig {
        layers: a.layers,
        dim: a.dim,
        heads: a.heads,
        ffn_dim: a.ffn_dim,
        vocab: a.vocab,
        max_seq: a.seq_len,
        num_classes: a.classes,
        seed: a.seed,
    };
    model_cfg.validate()?;
    let train_cfg = a.train.resolve(TrainConfig::pretrain_default(), a.seed);
    train_cfg.validate()?;
    let task = a.data.resolve(TaskKind::Majority, &model_cfg)?;
    let outcome = pretrain(&model_cfg, &train_cfg, &task)?;
    let (ckpt, csv) = write_outcome(&a.out, &outcome)?;
    manifest.write(
        &a.out.join("manifest.json"),
        json!({"model": model_cfg, "train": train_cfg, "task": task}),
        vec![a.seed],
        &[],
        &[&ckpt, &csv],
    )
}

pub fn parse_seeds(spec: Option<&str>, single: u64) -> Result<Vec<u64>> {
    match spec {
        None => Ok(vec![single]),
        Some("all") => Ok(DEFAULT_SEEDS.to_vec()),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad seed `{s}`"))))
            .collect(),
    }
}

/// Worker count for seed fan-out: `AILORA_THREADS`, else available cores.
pub fn fan_out_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `job` over `items` on up to `threads` workers; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, job: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

fn finetune_into(dir: &Path, pretrained: &TensorStore, cfg: &AdapterConfig, train: &TrainConfig, task: &SynthTask) -> Result<Vec<PathBuf>> {
    let outcome = finetune(pretrained, cfg, train, task)?;
    let (ckpt, csv) = write_outcome(dir, &outcome)?;
    Ok(vec![ckpt, csv])
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("finetune");
    let pretrained = TensorStore::read(&a.checkpoint)?;
    let model_cfg = ModelConfig::from_checkpoint(&pretrained)?;
    let task = a.data.resolve(TaskKind::Parity, &model_cfg)?;
    let seeds = parse_seeds(a.seeds.as_deref(), a.seed)?;
    // Validate once before any work starts.
    adapter_config(&a.adapter, seeds[0])?;
    a.train.resolve(TrainConfig::finetune_default(), seeds[0]).validate()?;

    let single = a.seeds.is_none();
    let results = parallel_map(&seeds, fan_out_threads(), |&seed| {
        let dir = if single { a.out.clone() } else { a.out.join(format!("seed_{seed}")) };
        let cfg = adapter_config(&a.adapter, seed)?;
        finetune_into(&dir, &pretrained, &cfg, &a.train.resolve(TrainConfig::finetune_default(), seed), &task)
    });
    let mut outputs = Vec::new();
    for r in results {
        outputs.extend(r?);
    }
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let config = json!({
        "adapter": adapter_config(&a.adapter, seeds[0])?,
        "train": a.train.resolve(TrainConfig::finetune_default(), seeds[0]),
        "task": task,
    });
    create_dir(&a.out)?;
    manifest.write(&a.out.join("manifest.json"), config, seeds, &[&a.checkpoint], &outputs)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("sweep");
    let pretrained = TensorStore::read(&a.checkpoint)?;
    let model_cfg = ModelConfig::from_checkpoint(&pretrained)?;
    let task = a.data.resolve(TaskKind::Parity, &model_cfg)?;
    let projections: Vec<Projection> =
        a.projections.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_>>()?;
    let ranks: Vec<usize> = a
        .ranks
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad rank `{s}`"))))
        .collect::<Result<_>>()?;
    let scheme: AdapterScheme = a.scheme.parse()?;
    let train = a.train.resolve(TrainConfig::finetune_default(), a.seed);
    train.validate()?;
    let configs: Vec<AdapterConfig> = ranks
        .iter()
        .map(|&r| {
            let cfg = AdapterConfig::new(scheme, Ranks::uniform(&projections, r), a.alpha, a.seed);
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_>>()?;

    let results = parallel_map(&configs, fan_out_threads(), |cfg| {
        let r = cfg.ranks.adapted().map(|p| cfg.ranks.get(p)).max().unwrap_or(0);
        let outcome = finetune(&pretrained, cfg, &train, &task)?;
        let dir = a.out.join(format!("rank_{r}"));
        write_outcome(&dir, &outcome)?;
        Ok::<_, Error>((r, outcome.curve.last().copied()))
    });
    let mut summary = String::from("rank,final_train_loss,final_eval_metric\n");
    for res in results {
        let (r, last) = res?;
        match last {
            Some(rec) => summary.push_str(&format!("{r},{:.5e},{:.5e}\n", rec.train_loss, rec.eval_metric)),
            None => summary.push_str(&format!("{r},,\n")),
        }
    }
    create_dir(&a.out)?;
    let summary_path = a.out.join("summary.csv");
    fs::write(&summary_path, summary)?;
    manifest.write(
        &a.out.join("manifest.json"),
        json!({"scheme": scheme, "ranks": ranks, "projections": projections, "alpha": a.alpha, "train": train, "task": task}),
        vec![a.seed],
        &[&a.checkpoint],
        &[&summary_path],
    )
}

/// Matrix compared by the similarity metric for one layer: `scale·B·A` for
/// an adapter checkpoint, `W − W_base` when a base is given, else `W`.
pub fn similarity_matrix(ckpt: &TensorStore, base: Option<&TensorStore>, proj: Projection, layer: usize) -> Result<Matrix> {
    let name = proj.weight_name(layer);
    if ckpt.contains(&format!("{name}.a")) {
        let cfg = adapter_config_from_store(ckpt)?;
        let b = ckpt.require(&format!("{name}.b"))?;
        let a = ckpt.require(&format!("{name}.a"))?;
        return b.matmul(a)?.scale(cfg.scale_for(proj));
    }
    let w = ckpt.require(&name)?;
    match base {
        Some(base) => w.sub(base.require(&name)?),
        None => Ok(w.clone()),
    }
}

fn layers_of(store: &TensorStore, proj: Projection) -> usize {
    let dense = count_layers(store);
    if dense > 0 {
        return dense;
    }
    (0..).take_while(|&i| store.contains(&format!("{}.a", proj.weight_name(i)))).count()
}

fn write_report(dir: &Path, report: &Report) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(path)
}

pub fn cmd_similarity(a: &SimilarityArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("analyze similarity");
    let proj: Projection = a.proj.parse()?;
    let left = TensorStore::read(&a.left)?;
    let right = TensorStore::read(&a.right)?;
    let left_base = a.left_base.as_ref().map(TensorStore::read).transpose()?;
    let right_base = a.right_base.as_ref().map(TensorStore::read).transpose()?;
    let layers = layers_of(&left, proj);
    if layers == 0 || layers != layers_of(&right, proj) {
        return Err(Error::Config(format!("checkpoints disagree on the number of layers carrying `{proj}`")));
    }
    let mut per_layer = Vec::with_capacity(layers);
    for i in 0..layers {
        let m1 = similarity_matrix(&left, left_base.as_ref(), proj, i)?;
        let m2 = similarity_matrix(&right, right_base.as_ref(), proj, i)?;
        if m1.rows() != m2.rows() {
            return Err(Error::Config(format!("layer {i}: {:?} vs {:?}", m1.shape(), m2.shape())));
        }
        per_layer.push(subspace_similarity(&m1, &m2, a.rank).map_err(|e| Error::Config(e.to_string()))?);
    }
    let mut params = Map::new();
    params.insert("proj".into(), json!(proj));
    params.insert("rank".into(), json!(a.rank));
    let report = write_report(&a.out, &Report::per_layer("similarity", per_layer, params.clone()))?;
    manifest.write(&a.out.join("manifest.json"), Value::Object(params), vec![], &[&a.left, &a.right], &[&report])
}

/// Dense weights of a checkpoint that may be an adapter checkpoint.
fn dense_weights(pretrained: &TensorStore, ckpt: &TensorStore) -> Result<TensorStore> {
    if ckpt.names().any(|n| n.ends_with(".base")) {
        load_model(pretrained, Some(ckpt))?.merged_store()
    } else {
        Ok(ckpt.clone())
    }
}

pub fn cmd_delta_norms(a: &DeltaNormArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("analyze delta-norms");
    let proj: Projection = a.proj.parse()?;
    let pretrained = TensorStore::read(&a.pretrained)?;
    let finetuned = dense_weights(&pretrained, &TensorStore::read(&a.finetuned)?)?;
    let norms = delta_norms(&pretrained, &finetuned, proj).map_err(|e| match e {
        Error::Shape(m) | Error::MissingTensor(m) => Error::Config(m),
        other => other,
    })?;
    let mut params = Map::new();
    params.insert("proj".into(), json!(proj));
    let report = write_report(&a.out, &Report::per_layer("delta-norms", norms, params.clone()))?;
    manifest.write(&a.out.join("manifest.json"), Value::Object(params), vec![], &[&a.pretrained, &a.finetuned], &[&report])
}

pub fn cmd_forgetting(a: &ForgettingArgs) -> Result<()> {
    let manifest = ManifestBuilder::start("analyze forgetting");
    let pretrained_store = TensorStore::read(&a.pretrained)?;
    let pre = load_model(&pretrained_store, None)?;
    let mut ft = load_model(&pretrained_store, Some(&TensorStore::read(&a.finetuned)?))?;
    if a.head == HeadSource::Pretrained {
        restore_head(&mut ft, &pretrained_store)?;
    }
    let cfg = pre.config().clone();
    let task = SynthTask {
        kind: a.task.parse()?,
        seq_len: cfg.max_seq,
        vocab: cfg.vocab,
        num_classes: cfg.num_classes,
        sample_count: a.samples,
        seed: a.data_seed,
    };
    let eval = task.generate()?;
    let result = forgetting_loss(&pre, &ft, &eval.inputs)?;
    let mut params = Map::new();
    params.insert("task".into(), serde_json::to_value(&task)?);
    params.insert("direction".into(), json!("cross_entropy(target=pretrained, prediction=finetuned)"));
    params.insert("head".into(), json!(a.head));
    params.insert("probability_floor".into(), json!(crate::analysis::PROB_FLOOR));
    params.insert("sample_count".into(), json!(result.sample_count));
    let report = write_report(&a.out, &Report::scalar("forgetting", result.value, params.clone()))?;
    manifest.write(&a.out.join("manifest.json"), Value::Object(params), vec![], &[&a.pretrained, &a.finetuned], &[&report])
}
