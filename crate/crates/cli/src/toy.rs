use std::path::PathBuf;

use anyhow::{anyhow, bail, Result};
use faft_core::dataset::{self, Header};
use faft_core::toy::{self, Mode, SeedComparison, ToyError, TrainConfig, WeightRefresh};
use faft_core::weighting::MeanMode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{self, required};
use crate::{CmdResult, Failure};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(clap::Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic pair corpus.
    Gen(GenArgs),
    /// Train one arm and report its metrics.
    Train(TrainArgs),
    /// Train both arms per seed and compare them.
    Compare(CompareArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradArgs),
}

/// Training knobs shared by every subcommand that trains.
#[derive(clap::Args, Debug, Serialize)]
pub struct TrainFlags {
    /// Synthetic tasks per seed.
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    dim: Option<usize>,
    /// When per-sample weights are recomputed.
    #[arg(long, value_parser = ["per-batch", "per-epoch"])]
    refresh: Option<String>,
    #[arg(long, value_parser = ["hybrid-weighted", "plain"])]
    mean_mode: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSettings {
    n_tasks: usize,
    alpha: f64,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    dim: usize,
    refresh: WeightRefresh,
    mean_mode: MeanMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            n_tasks: 200,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            dim: t.dim,
            refresh: t.refresh,
            mean_mode: t.mean_mode,
        }
    }
}

impl TrainSettings {
    fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            dim: self.dim,
            refresh: self.refresh,
            mean_mode: self.mean_mode,
        }
    }

    fn check(&self) -> Result<(), Failure> {
        if self.n_tasks == 0 {
            return Err(Failure::usage(anyhow!("--n-tasks must be at least 1")));
        }
        Ok(())
    }
}

fn toy_failure(e: ToyError) -> Failure {
    match e {
        ToyError::DivergenceDetected { .. } => Failure::numeric(e),
        ToyError::EmptyCorpus => Failure::data(e),
        ToyError::InvalidConfig(_) => Failure::usage(e),
    }
}

fn examples(seed: u64, n_tasks: usize) -> Result<Vec<toy::TrainExample>, Failure> {
    toy::prepare(&toy::gen_corpus(seed, n_tasks)).map_err(Failure::data)
}

fn write_report(path: &Option<PathBuf>, subcommand: &str, resolved: Value, lines: &[Value]) -> CmdResult {
    if let Some(path) = path {
        dataset::write_records(lines, path, Some(&Header::new(subcommand, resolved))).map_err(Failure::data)?;
    }
    Ok(())
}

pub fn run(cmd: &Command, config: &Map<String, Value>) -> CmdResult {
    match cmd {
        Command::Gen(args) => gen(args, config),
        Command::Train(args) => train(args, config),
        Command::Compare(args) => compare(args, config),
        Command::Gradcheck(args) => gradcheck(args, config),
    }
}

#[derive(clap::Args, Debug, Serialize)]
pub struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_tasks: Option<usize>,
    /// Output pair records.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the task descriptions (critical position and tokens).
    #[arg(long)]
    tasks: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenResolved {
    seed: u64,
    n_tasks: usize,
    output: Option<PathBuf>,
    tasks: Option<PathBuf>,
}

impl Default for GenResolved {
    fn default() -> Self {
        GenResolved { seed: 0, n_tasks: 200, output: None, tasks: None }
    }
}

fn gen(args: &GenArgs, config: &Map<String, Value>) -> CmdResult {
    let (cfg, resolved): (GenResolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    let output = required(&cfg.output, "output").map_err(Failure::usage)?;
    if cfg.n_tasks == 0 {
        return Err(Failure::usage(anyhow!("--n-tasks must be at least 1")));
    }
    let corpus = toy::gen_corpus(cfg.seed, cfg.n_tasks);
    let header = Header::new("toy gen", resolved);
    dataset::write_records(corpus.iter().map(|(p, _)| p), output, Some(&header)).map_err(Failure::data)?;
    if let Some(tasks) = &cfg.tasks {
        let lines: Vec<Value> = corpus.iter().map(|(p, t)| json!({"id": p.id, "task": t})).collect();
        dataset::write_records(&lines, tasks, Some(&header)).map_err(Failure::data)?;
    }
    eprintln!("wrote {} pairs to {}", corpus.len(), output.display());
    Ok(())
}

#[derive(clap::Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["faft", "sft"])]
    mode: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
    /// Run report: one line per epoch, then the final metrics.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainResolved {
    seed: u64,
    mode: Mode,
    #[serde(flatten)]
    train: TrainSettings,
    report: Option<PathBuf>,
}

impl Default for TrainResolved {
    fn default() -> Self {
        TrainResolved { seed: 0, mode: Mode::Faft, train: TrainSettings::default(), report: None }
    }
}

fn train(args: &TrainArgs, config: &Map<String, Value>) -> CmdResult {
    let (cfg, resolved): (TrainResolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    cfg.train.check()?;
    let ex = examples(cfg.seed, cfg.train.n_tasks)?;
    let (model, report) = toy::train::<f64>(&ex, &cfg.train.train_config(cfg.mode, cfg.seed)).map_err(toy_failure)?;
    let metrics = toy::evaluate(&model, &ex);

    println!("mode {} seed {}: {} steps", cfg.mode, cfg.seed, report.steps);
    println!(
        "loss {:.6} -> {:.6}",
        report.loss_history.first().copied().unwrap_or(f64::NAN),
        report.loss_history.last().copied().unwrap_or(f64::NAN)
    );
    if let Some((lo, hi)) = report.weight_range {
        println!("weight range [{lo:.6}, {hi:.6}]");
    }
    println!("critical_prob_mean     {:.6}", metrics.critical_prob_mean);
    println!("noncritical_prob_mean  {:.6}", metrics.noncritical_prob_mean);
    println!("greedy_exact_match     {:.4}", metrics.greedy_exact_match_rate);

    let mut lines: Vec<Value> = report
        .loss_history
        .iter()
        .enumerate()
        .map(|(e, l)| json!({"seed": cfg.seed, "mode": cfg.mode, "epoch": e + 1, "loss": l}))
        .collect();
    lines.push(json!({"seed": cfg.seed, "mode": cfg.mode, "metrics": metrics, "weight_range": report.weight_range}));
    write_report(&cfg.report, "toy train", resolved, &lines)
}

#[derive(clap::Args, Debug, Serialize)]
pub struct CompareArgs {
    /// Seeds as an inclusive range `1..5` or a list `1,4,9`.
    #[arg(long)]
    seeds: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
    /// Seeds trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run report: per-seed metrics and loss histories.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompareResolved {
    seeds: String,
    #[serde(flatten)]
    train: TrainSettings,
    jobs: usize,
    report: Option<PathBuf>,
}

impl Default for CompareResolved {
    fn default() -> Self {
        CompareResolved { seeds: "1..5".into(), train: TrainSettings::default(), jobs: 1, report: None }
    }
}

pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    let seeds: Vec<u64> = if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse()?;
        let hi: u64 = hi.trim().trim_start_matches('=').parse()?;
        if hi < lo {
            bail!("empty seed range `{text}`");
        }
        (lo..=hi).collect()
    } else {
        text.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn compare(args: &CompareArgs, config: &Map<String, Value>) -> CmdResult {
    let (cfg, resolved): (CompareResolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    cfg.train.check()?;
    let seeds = parse_seeds(&cfg.seeds).map_err(|e| Failure::usage(anyhow!("--seeds `{}`: {e}", cfg.seeds)))?;
    if cfg.jobs == 0 {
        return Err(Failure::usage(anyhow!("--jobs must be at least 1")));
    }
    let base = cfg.train.train_config(Mode::Faft, 0);
    let chunk = seeds.len().div_ceil(cfg.jobs);
    let rows: Vec<SeedComparison> = std::thread::scope(|s| {
        let handles: Vec<_> =
            seeds.chunks(chunk).map(|part| s.spawn(|| toy::compare(part, cfg.train.n_tasks, &base))).collect();
        handles.into_iter().map(|h| h.join().expect("compare worker panicked")).collect::<Result<Vec<_>, _>>()
    })
    .map_err(toy_failure)?
    .into_iter()
    .flatten()
    .collect();

    print!("{}", toy::summary_table(&rows));
    let lines: Vec<Value> = rows.iter().map(|r| serde_json::to_value(r).expect("report serializes")).collect();
    write_report(&cfg.report, "toy compare", resolved, &lines)
}

#[derive(clap::Args, Debug, Serialize)]
pub struct GradArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["faft", "sft", "both"])]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Epochs of training before checking; 0 checks the initial model.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GradResolved {
    seed: u64,
    mode: String,
    alpha: f64,
    epochs: usize,
}

impl Default for GradResolved {
    fn default() -> Self {
        GradResolved { seed: 0, mode: "both".into(), alpha: 2.0, epochs: 0 }
    }
}

fn gradcheck(args: &GradArgs, config: &Map<String, Value>) -> CmdResult {
    let (cfg, _): (GradResolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    let modes = match cfg.mode.as_str() {
        "faft" => vec![Mode::Faft],
        "sft" => vec![Mode::Sft],
        "both" => vec![Mode::Sft, Mode::Faft],
        other => return Err(Failure::usage(anyhow!("unknown mode `{other}` (expected faft, sft or both)"))),
    };
    if !(cfg.alpha >= 1.0 && cfg.alpha.is_finite()) {
        return Err(Failure::usage(anyhow!("--alpha must be finite and at least 1")));
    }
    let ex = examples(cfg.seed, 40)?;
    let train_cfg = TrainConfig { alpha: cfg.alpha, epochs: cfg.epochs, seed: cfg.seed, ..Default::default() };
    let model = if cfg.epochs == 0 {
        toy::train::initial_model::<f64>(&train_cfg)
    } else {
        toy::train::<f64>(&ex, &train_cfg).map_err(toy_failure)?.0
    };
    let batch: Vec<&toy::TrainExample> = ex.iter().take(4).collect();
    let mut worst: f64 = 0.0;
    for mode in modes {
        let err = toy::grad_check(&model, &batch, mode, cfg.alpha, cfg.seed);
        println!("{mode}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    println!("max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:e})");
    if worst < GRAD_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::numeric(anyhow!("gradient check failed: {worst:.3e} >= {GRAD_TOLERANCE:e}")))
    }
}
