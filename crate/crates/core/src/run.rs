//! Training drivers: rounds, periodic evaluation, checkpoints and metrics on disk.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::curriculum::{BaselineRoundStats, BaselineTrainer};
use crate::holdout::{evaluate, EvalReport, HoldoutError, HoldoutTask, TaskName};
use crate::nn::ParamVector;
use crate::persist::checkpoint::{checkpoint_file_name, latest_checkpoint, Checkpoint, CheckpointError};
use crate::persist::config::{ConfigError, RunConfig};
use crate::persist::metrics::{read_metrics, MetricsRecord, MetricsWriter};
use crate::persist::report::eval_metric;
use crate::ppo::OptimizeStats;
use crate::scalar::Scalar;
use crate::selfplay::{Agent, Greedy, RoundStats, SelfPlayError, SelfPlayTrainer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    SelfPlay(#[from] SelfPlayError),
    #[error(transparent)]
    Holdout(#[from] HoldoutError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(checkpoint_file_name(step))
    }
}

/// Evaluates `solver` on each task with the run's evaluation settings.
pub fn evaluate_suite<T: Scalar>(
    solver: &ParamVector<T>,
    cfg: &RunConfig,
    tasks: &[TaskName],
    episodes: usize,
) -> Result<Vec<EvalReport>, RunError> {
    let tol = cfg.reward.tolerance();
    let greedy = Greedy(solver);
    let agent: &dyn Agent<T> = if cfg.eval.greedy { &greedy } else { solver };
    let mut out = Vec::with_capacity(tasks.len());
    for &t in tasks {
        if HoldoutTask::new(t, 0).check(&cfg.grid).is_err() {
            continue;
        }
        let task = HoldoutTask::new(t, cfg.eval.seed);
        out.push(evaluate(agent, &task, &cfg.grid, &tol, &cfg.reward, cfg.eval.bob_max_steps_per_object, episodes)?);
    }
    Ok(out)
}

pub fn log_eval(w: &mut MetricsWriter, step: u64, agent: &str, reports: &[EvalReport]) -> Result<(), RunError> {
    for r in reports {
        let t = r.task.as_str();
        for (field, v) in [
            ("success_rate", r.success_rate),
            ("ci_low", r.ci_low),
            ("ci_high", r.ci_high),
            ("goals", r.total_goals as f64),
        ] {
            w.log(step, agent, &eval_metric(t, field), v).map_err(io(w.path()))?;
        }
    }
    Ok(())
}

fn log_update(w: &mut MetricsWriter, step: u64, agent: &str, s: &OptimizeStats) -> std::io::Result<()> {
    w.log(step, agent, "policy_loss", s.policy_loss)?;
    w.log(step, agent, "value_loss", s.value_loss)?;
    w.log(step, agent, "entropy", s.entropy)?;
    w.log(step, agent, "approx_kl", s.approx_kl)?;
    w.log(step, agent, "clip_fraction", s.clip_fraction)?;
    if s.bc_samples_processed > 0 {
        w.log(step, agent, "abc_loss", s.abc_loss)?;
    }
    Ok(())
}

fn log_round(w: &mut MetricsWriter, s: &RoundStats) -> std::io::Result<()> {
    let r = &s.rollout;
    let goals = r.goals_set.max(1) as f64;
    w.log(s.step, "selfplay", "episodes", r.episodes as f64)?;
    w.log(s.step, "selfplay", "goals_set", r.goals_set as f64)?;
    w.log(s.step, "selfplay", "invalid_fraction", r.invalid_goals as f64 / goals)?;
    w.log(s.step, "selfplay", "out_of_zone_fraction", r.out_of_zone_goals as f64 / goals)?;
    w.log(s.step, "selfplay", "bob_success_rate", r.bob_success_rate())?;
    w.log(s.step, "selfplay", "demonstrations", r.demonstrations as f64)?;
    w.log(s.step, "selfplay", "past_game_fraction", r.past_game_fraction())?;
    w.log(s.step, "alice", "reward_per_goal", r.alice_reward_sum / goals)?;
    if let Some(a) = &s.alice {
        log_update(w, s.step, "alice", a)?;
    }
    if let Some(b) = &s.bob {
        log_update(w, s.step, "bob", b)?;
    }
    Ok(())
}

/// Drops records past `step` so a resumed run keeps steps monotone.
fn truncate_metrics(path: &Path, step: u64) -> Result<(), RunError> {
    if !path.exists() {
        return Ok(());
    }
    let (records, _) = read_metrics(path).map_err(io(path))?;
    let kept: Vec<&MetricsRecord> = records.iter().filter(|r| r.step <= step).collect();
    let mut text = String::new();
    for r in kept {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, text).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

fn prepare(cfg: &RunConfig, resume: bool) -> Result<(RunPaths, Option<Checkpoint>), RunError> {
    let paths = RunPaths::new(&cfg.output_dir);
    fs::create_dir_all(paths.checkpoints()).map_err(io(&paths.checkpoints()))?;
    let ckpt = if resume {
        match latest_checkpoint(&paths.checkpoints()) {
            Some(p) => {
                let c = Checkpoint::read(&p)?;
                if c.header.config_hash != cfg.hash() {
                    return Err(CheckpointError::Mismatch(format!(
                        "{} was written by a different configuration",
                        p.display()
                    ))
                    .into());
                }
                truncate_metrics(&paths.metrics(), c.header.step)?;
                Some(c)
            }
            None => None,
        }
    } else {
        None
    };
    if ckpt.is_none() && paths.metrics().exists() {
        fs::remove_file(paths.metrics()).map_err(io(&paths.metrics()))?;
    }
    cfg.save(&paths.config())?;
    Ok((paths, ckpt))
}

/// Runs self-play until `steps` optimizer rounds have been completed in total.
/// With `resume`, continues from the latest checkpoint in the run directory.
pub fn run_selfplay<T: Scalar>(
    cfg: &RunConfig,
    steps: u64,
    resume: bool,
    progress: &mut dyn FnMut(&RoundStats),
) -> Result<SelfPlayTrainer<T>, RunError> {
    let (paths, ckpt) = prepare(cfg, resume)?;
    let mut trainer = match ckpt {
        Some(c) => c.into_selfplay::<T>(cfg.selfplay_settings())?,
        None => SelfPlayTrainer::new(cfg.selfplay_settings(), &cfg.network)?,
    };
    let hash = cfg.hash();
    let mut metrics = MetricsWriter::open(&paths.metrics()).map_err(io(&paths.metrics()))?;
    while trainer.step < steps {
        let stats = trainer.round()?;
        log_round(&mut metrics, &stats).map_err(io(&paths.metrics()))?;
        progress(&stats);
        let step = trainer.step;
        let last = step == steps;
        if (cfg.eval.interval > 0 && step % cfg.eval.interval == 0) || (last && cfg.eval.interval > 0) {
            let reports = evaluate_suite(&trainer.bob, cfg, &cfg.eval.tasks, cfg.eval.episodes)?;
            log_eval(&mut metrics, step, "bob", &reports)?;
        }
        if step % cfg.train.checkpoint_interval == 0 || last {
            Checkpoint::from_selfplay(&trainer, &hash).write(&paths.checkpoint(step))?;
        }
    }
    metrics.flush().map_err(io(&paths.metrics()))?;
    Ok(trainer)
}

fn log_baseline_round(w: &mut MetricsWriter, s: &BaselineRoundStats) -> std::io::Result<()> {
    w.log(s.step, "policy", "train_success_rate", s.successes as f64 / s.episodes.max(1) as f64)?;
    if let Some(u) = &s.update {
        log_update(w, s.step, "policy", u)?;
    }
    for (kind, v) in &s.adr {
        w.log(s.step, "adr", kind.as_str(), *v)?;
    }
    Ok(())
}

/// Baseline counterpart of [`run_selfplay`].
pub fn run_baseline<T: Scalar>(
    cfg: &RunConfig,
    steps: u64,
    resume: bool,
    progress: &mut dyn FnMut(&BaselineRoundStats),
) -> Result<BaselineTrainer<T>, RunError> {
    let (paths, ckpt) = prepare(cfg, resume)?;
    let mut trainer = match ckpt {
        Some(c) => c.into_baseline::<T>(cfg.baseline_settings())?,
        None => BaselineTrainer::new(cfg.baseline_settings(), &cfg.network)?,
    };
    let hash = cfg.hash();
    let mut metrics = MetricsWriter::open(&paths.metrics()).map_err(io(&paths.metrics()))?;
    while trainer.step < steps {
        let stats = trainer.round()?;
        log_baseline_round(&mut metrics, &stats).map_err(io(&paths.metrics()))?;
        progress(&stats);
        let step = trainer.step;
        let last = step == steps;
        if cfg.eval.interval > 0 && (step % cfg.eval.interval == 0 || last) {
            let reports = evaluate_suite(&trainer.policy, cfg, &cfg.eval.tasks, cfg.eval.episodes)?;
            log_eval(&mut metrics, step, "policy", &reports)?;
        }
        if step % cfg.train.checkpoint_interval == 0 || last {
            Checkpoint::from_baseline(&trainer, &hash).write(&paths.checkpoint(step))?;
        }
    }
    metrics.flush().map_err(io(&paths.metrics()))?;
    Ok(trainer)
}
