use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use goalplay_core::abc::ClipMode;
use goalplay_core::curriculum::BaselineVariant;
use goalplay_core::goal::AliceRewardMode;
use goalplay_core::holdout::{payoff_matrix, TaskName};
use goalplay_core::persist::metrics::{read_metrics, MetricsWriter};
use goalplay_core::persist::report::build_report;
use goalplay_core::persist::svg::heatmap;
use goalplay_core::persist::{Checkpoint, RunConfig};
use goalplay_core::run::{evaluate_suite, log_eval, run_baseline, run_selfplay, RunPaths};
use goalplay_core::Params;

/// Environment variable that overrides the configured output directory.
const OUTPUT_DIR_ENV: &str = "GOALPLAY_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "goalplay", version, about = "Asymmetric self-play on a grid tabletop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train Alice and Bob with self-play.
    Train(TrainArgs),
    /// Evaluate a checkpoint on holdout tasks.
    Eval(EvalArgs),
    /// Cross-play Alice and Bob checkpoints into a payoff matrix.
    Payoff(PayoffArgs),
    /// Train a single goal-conditioned policy on the holdout goal mixture.
    Baseline(BaselineArgs),
    /// Render success-rate curves and a summary table from run directories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Disable the behavioral cloning term.
    NoAbc,
    /// Relabel every valid goal, not only failed ones.
    NoBcFilter,
    /// Use the unclipped likelihood ratio in the cloning term.
    NoAbcClip,
    /// Use the pessimistic min-of-clipped cloning objective.
    PpoMinClip,
    /// Reward Alice by Bob's extra time instead of the game reward.
    TimestepReward,
    /// Never play against past snapshots.
    NoPastOpponents,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON). Defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total optimizer rounds (defaults to train.steps from the config).
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Run directory; overrides GOALPLAY_OUTPUT_DIR and the config's output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rollout workers; overrides the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Print one line per round.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Ablation to apply on top of the config; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    run: RunArgs,
    /// no_curriculum, distance, distribution or full (defaults to baseline.variant).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file (ckpt-<step>.bin); Bob or the baseline policy is evaluated.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated task names or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Episodes per task (defaults to eval.episodes).
    #[arg(long)]
    episodes: Option<usize>,
    /// Configuration to evaluate under; defaults to the run's saved config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Results file; defaults to eval-<step>.jsonl next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PayoffArgs {
    /// Checkpoints whose Alice sets the goals (rows).
    #[arg(long, num_args = 1.., required = true)]
    alice: Vec<PathBuf>,
    /// Checkpoints whose Bob solves them (columns).
    #[arg(long, num_args = 1.., required = true)]
    bob: Vec<PathBuf>,
    /// Games per cell.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Game rules to play under; defaults to the first Alice checkpoint's run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for payoff.json and payoff.svg.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing metrics.jsonl.
    run_dir: PathBuf,
    /// Additional runs to overlay.
    #[arg(long, num_args = 1..)]
    compare: Vec<PathBuf>,
    /// Defaults to <run_dir>/report.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn checked(cfg: RunConfig) -> Result<RunConfig> {
    if let Err((section, msg)) = cfg.validate() {
        bail!("invalid configuration: {section}: {msg}");
    }
    Ok(cfg)
}

fn apply_ablation(cfg: &mut RunConfig, a: Ablation) {
    match a {
        Ablation::NoAbc => cfg.abc.enabled = false,
        Ablation::NoBcFilter => cfg.abc.filter_failures = false,
        Ablation::NoAbcClip => cfg.abc.clip_enabled = false,
        Ablation::PpoMinClip => cfg.abc.clip_mode = ClipMode::PpoMin,
        Ablation::TimestepReward => cfg.reward.alice_reward = AliceRewardMode::Timestep,
        Ablation::NoPastOpponents => cfg.game.past_opponent_prob = 0.0,
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = usage(load_config(&args.run))?;
    for &a in &args.ablate {
        apply_ablation(&mut cfg, a);
    }
    let cfg = usage(checked(cfg))?;
    let steps = args.run.steps.unwrap_or(cfg.train.steps);
    let start = Instant::now();
    let verbose = args.run.verbose;
    let trainer = runtime(
        run_selfplay::<f64>(&cfg, steps, args.run.resume, &mut |s| {
            if verbose {
                eprintln!(
                    "step {:>6}  goals {:>4}  invalid {:.2}  bob success {:.3}  demos {:>4}  {:.1}s",
                    s.step,
                    s.rollout.goals_set,
                    s.rollout.invalid_goals as f64 / s.rollout.goals_set.max(1) as f64,
                    s.rollout.bob_success_rate(),
                    s.rollout.demonstrations,
                    start.elapsed().as_secs_f64()
                );
            }
        })
        .map_err(anyhow::Error::from),
    )?;
    println!(
        "trained to step {} in {:.1}s; run directory {}",
        trainer.step,
        start.elapsed().as_secs_f64(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), Failure> {
    let mut cfg = usage(load_config(&args.run))?;
    if let Some(v) = &args.variant {
        cfg.baseline.variant = usage(v.parse::<BaselineVariant>().map_err(anyhow::Error::msg))?;
    }
    let cfg = usage(checked(cfg))?;
    let steps = args.run.steps.unwrap_or(cfg.train.steps);
    let start = Instant::now();
    let verbose = args.run.verbose;
    let trainer = runtime(
        run_baseline::<f64>(&cfg, steps, args.run.resume, &mut |s| {
            if verbose {
                eprintln!(
                    "step {:>6}  episodes {:>4}  success {:.3}  adr {:?}  {:.1}s",
                    s.step,
                    s.episodes,
                    s.successes as f64 / s.episodes.max(1) as f64,
                    s.adr,
                    start.elapsed().as_secs_f64()
                );
            }
        })
        .map_err(anyhow::Error::from),
    )?;
    println!(
        "{} baseline trained to step {} in {:.1}s; run directory {}",
        cfg.baseline.variant,
        trainer.step,
        start.elapsed().as_secs_f64(),
        cfg.output_dir.display()
    );
    Ok(())
}

/// The run directory a checkpoint lives in (`<run>/checkpoints/ckpt-*.bin`).
fn run_dir_of(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    if parent.file_name()? == "checkpoints" {
        parent.parent().map(Path::to_path_buf)
    } else {
        None
    }
}

fn config_for_checkpoint(explicit: Option<&Path>, checkpoint: &Path) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return Ok(RunConfig::load(p)?);
    }
    if let Some(run) = run_dir_of(checkpoint) {
        let p = RunPaths::new(&run).config();
        if p.exists() {
            return Ok(RunConfig::load(&p)?);
        }
    }
    Ok(RunConfig::default())
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::read(path)?;
    if ckpt.header.network != cfg.network {
        bail!("{}: network architecture in checkpoint does not match the configuration", path.display());
    }
    Ok(ckpt)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let tasks = usage(TaskName::parse_suite(&args.suite).map_err(anyhow::Error::from))?;
    let cfg = usage(config_for_checkpoint(args.config.as_deref(), &args.checkpoint))?;
    let episodes = args.episodes.unwrap_or(cfg.eval.episodes);
    if episodes == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--episodes must be >= 1")));
    }
    let ckpt = runtime(load_checkpoint(&args.checkpoint, &cfg))?;
    let solver: Params = runtime(ckpt.solver().map_err(anyhow::Error::from))?;
    let reports = runtime(evaluate_suite(&solver, &cfg, &tasks, episodes).map_err(anyhow::Error::from))?;
    let mut lines = String::new();
    for r in &reports {
        let line = serde_json::to_string(r).expect("report serializes");
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    let step = ckpt.header.step;
    let out = args
        .out
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).join(format!("eval-{step:08}.jsonl")));
    runtime(fs::write(&out, lines).with_context(|| format!("writing {}", out.display())))?;
    if let Some(run) = run_dir_of(&args.checkpoint) {
        let metrics = RunPaths::new(&run).metrics();
        if metrics.exists() {
            let mut w = runtime(MetricsWriter::open(&metrics).with_context(|| metrics.display().to_string()))?;
            let agent =
                if ckpt.header.kind == goalplay_core::persist::CheckpointKind::SelfPlay { "bob" } else { "policy" };
            runtime(log_eval(&mut w, step, agent, &reports).map_err(anyhow::Error::from))?;
        }
    }
    Ok(())
}

fn cmd_payoff(args: PayoffArgs) -> Result<(), Failure> {
    let cfg = usage(config_for_checkpoint(args.config.as_deref(), &args.alice[0]))?;
    let load_side = |paths: &[PathBuf], side: &str| -> Result<Vec<(String, Params)>> {
        paths
            .iter()
            .map(|p| {
                let c = load_checkpoint(p, &cfg)?;
                let params: Params = c.params(side)?;
                Ok((format!("{side}@{}", c.header.step), params))
            })
            .collect()
    };
    let alices = runtime(load_side(&args.alice, "alice"))?;
    let bobs = runtime(load_side(&args.bob, "bob"))?;
    let m = runtime(
        payoff_matrix(&alices, &bobs, cfg.selfplay_settings().rules(), args.episodes, args.seed)
            .map_err(anyhow::Error::from),
    )?;
    let json = serde_json::to_string_pretty(&m).expect("matrix serializes");
    println!("{json}");
    runtime(fs::create_dir_all(&args.out_dir).with_context(|| args.out_dir.display().to_string()))?;
    let svg = heatmap("Payoff matrix: Bob success rate", &m.alice_labels, &m.bob_labels, &m.entries);
    runtime(fs::write(args.out_dir.join("payoff.json"), json + "\n").context("writing payoff.json"))?;
    runtime(fs::write(args.out_dir.join("payoff.svg"), svg).context("writing payoff.svg"))?;
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let mut runs = Vec::new();
    for dir in std::iter::once(&args.run_dir).chain(&args.compare) {
        let path = RunPaths::new(dir).metrics();
        let (records, skipped) = runtime(read_metrics(&path).with_context(|| format!("reading {}", path.display())))?;
        if skipped > 0 {
            eprintln!("warning: {}: skipped {skipped} malformed lines", path.display());
        }
        runs.push((run_label(dir), records));
    }
    let report = build_report(&runs);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = args.out.unwrap_or_else(|| args.run_dir.join("report"));
    runtime(fs::create_dir_all(&out).with_context(|| out.display().to_string()))?;
    for (task, svg) in &report.charts {
        runtime(fs::write(out.join(format!("{task}.svg")), svg).with_context(|| format!("writing {task}.svg")))?;
    }
    let table = report.summary_table();
    runtime(fs::write(out.join("summary.md"), &table).context("writing summary.md"))?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Payoff(a) => cmd_payoff(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
