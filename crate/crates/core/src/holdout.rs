//! Held-out evaluation tasks and the cross-play payoff matrix.
//!
//! None of these goal generators may run while self-play data is being
//! collected; doing so panics.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    sample_initial_state, EnvError, GridConfig, GridEnv, GripperState, ObjectState, Orientation, WorldState,
};
use crate::goal::{goal_achieved, Goal, GoalSource, GoalTarget, MatchTolerance};
use crate::nn::ParamVector;
use crate::scalar::Scalar;
use crate::selfplay::{in_selfplay_collection, play_episode, run_bob_turn, Agent, GameRules, Harvest, SelfPlayError};

/// Two-sided 99% normal quantile.
pub const Z_99: f64 = 2.575_829_303_548_901;

#[derive(Debug, Error)]
pub enum HoldoutError {
    #[error("unknown holdout task '{0}' (expected one of push-1, push-2, flip-1, flip-2, pick-and-place-1, pick-and-place-2, stack-2, or 'all')")]
    UnknownTask(String),
    #[error("task {task} needs {needed}")]
    Unsupported { task: TaskName, needed: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    SelfPlay(#[from] SelfPlayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskName {
    #[serde(rename = "push-1")]
    Push1,
    #[serde(rename = "push-2")]
    Push2,
    #[serde(rename = "flip-1")]
    Flip1,
    #[serde(rename = "flip-2")]
    Flip2,
    #[serde(rename = "pick-and-place-1")]
    PickAndPlace1,
    #[serde(rename = "pick-and-place-2")]
    PickAndPlace2,
    #[serde(rename = "stack-2")]
    Stack2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Push,
    Flip,
    PickAndPlace,
    Stack,
}

impl TaskName {
    pub const ALL: [TaskName; 7] = [
        TaskName::Push1,
        TaskName::Push2,
        TaskName::Flip1,
        TaskName::Flip2,
        TaskName::PickAndPlace1,
        TaskName::PickAndPlace2,
        TaskName::Stack2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Push1 => "push-1",
            TaskName::Push2 => "push-2",
            TaskName::Flip1 => "flip-1",
            TaskName::Flip2 => "flip-2",
            TaskName::PickAndPlace1 => "pick-and-place-1",
            TaskName::PickAndPlace2 => "pick-and-place-2",
            TaskName::Stack2 => "stack-2",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            TaskName::Push1 | TaskName::Push2 => TaskKind::Push,
            TaskName::Flip1 | TaskName::Flip2 => TaskKind::Flip,
            TaskName::PickAndPlace1 | TaskName::PickAndPlace2 => TaskKind::PickAndPlace,
            TaskName::Stack2 => TaskKind::Stack,
        }
    }

    pub fn n_objects(self) -> usize {
        match self {
            TaskName::Push1 | TaskName::Flip1 | TaskName::PickAndPlace1 => 1,
            _ => 2,
        }
    }

    /// Parses a comma-separated list; `all` expands to every task.
    pub fn parse_suite(s: &str) -> Result<Vec<TaskName>, HoldoutError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(TaskName::ALL);
            } else {
                out.push(part.parse()?);
            }
        }
        out.dedup();
        if out.is_empty() {
            return Err(HoldoutError::UnknownTask(s.to_string()));
        }
        Ok(out)
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = HoldoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskName::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| HoldoutError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutTask {
    pub name: TaskName,
    pub seed: u64,
    pub goals_per_episode: usize,
}

pub fn make_task(name: &str, seed: u64) -> Result<HoldoutTask, HoldoutError> {
    Ok(HoldoutTask { name: name.parse()?, seed, goals_per_episode: 5 })
}

impl HoldoutTask {
    pub fn new(name: TaskName, seed: u64) -> Self {
        HoldoutTask { name, seed, goals_per_episode: 5 }
    }

    pub fn check(&self, config: &GridConfig) -> Result<(), HoldoutError> {
        let n = self.name.n_objects();
        if n > config.max_objects || n > config.placement_area.area() {
            return Err(HoldoutError::Unsupported { task: self.name, needed: format!("{n} objects") });
        }
        if self.name.kind() == TaskKind::Stack && config.max_stack_height < 2 {
            return Err(HoldoutError::Unsupported { task: self.name, needed: "max_stack_height >= 2".into() });
        }
        if self.name.kind() == TaskKind::Push && n == config.placement_area.area() {
            return Err(HoldoutError::Unsupported { task: self.name, needed: "a free placement cell".into() });
        }
        Ok(())
    }

    pub fn sample_initial<R: Rng + ?Sized>(
        &self,
        config: &GridConfig,
        rng: &mut R,
    ) -> Result<WorldState, HoldoutError> {
        Ok(sample_initial_state(config, rng, self.name.n_objects())?)
    }

    /// A goal for the objects of `state` that is not already satisfied.
    pub fn generate_goal<R: Rng + ?Sized>(
        &self,
        config: &GridConfig,
        tol: &MatchTolerance,
        state: &WorldState,
        rng: &mut R,
    ) -> Goal {
        assert!(
            !in_selfplay_collection(),
            "holdout goal generator for {} invoked during self-play collection",
            self.name
        );
        generate_task_goal(self.name.kind(), config, tol, state, rng)
    }
}

/// Raw goal generator shared with the curriculum baselines. Retries until the goal
/// differs from `state`.
pub(crate) fn generate_task_goal<R: Rng + ?Sized>(
    kind: TaskKind,
    config: &GridConfig,
    tol: &MatchTolerance,
    state: &WorldState,
    rng: &mut R,
) -> Goal {
    loop {
        let targets = match kind {
            TaskKind::Push => push_targets(config, state, rng),
            TaskKind::Flip => flip_targets(config, state, rng),
            TaskKind::PickAndPlace => pick_targets(config, state, rng),
            TaskKind::Stack => stack_targets(config, state, rng),
        };
        let goal = Goal { targets, source: GoalSource::Holdout, rotation_weight: 1.0 };
        if !goal_achieved(config, state, &goal, tol).unwrap_or(true) {
            return goal;
        }
    }
}

fn distinct_cells<R: Rng + ?Sized>(config: &GridConfig, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let area = config.placement_area;
    index::sample(rng, area.area(), n).iter().map(|c| area.cell(c)).collect()
}

fn push_targets<R: Rng + ?Sized>(config: &GridConfig, state: &WorldState, rng: &mut R) -> Vec<GoalTarget> {
    distinct_cells(config, state.n_objects(), rng)
        .into_iter()
        .zip(&state.objects)
        .map(|((x, y), o)| GoalTarget { x, y, level: 0, orientation: o.orientation, in_air: false })
        .collect()
}

fn flip_targets<R: Rng + ?Sized>(config: &GridConfig, state: &WorldState, rng: &mut R) -> Vec<GoalTarget> {
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut targets = Vec::new();
    for o in &state.objects {
        let mut cell = (o.x, o.y);
        // objects sharing a stack cell need separate floor cells
        while taken.contains(&cell) || !config.placement_area.contains(cell.0, cell.1) {
            cell = config.placement_area.cell(rng.gen_range(0..config.placement_area.area()));
        }
        taken.push(cell);
        let turn = rng.gen_range(1..4) as i64;
        let orientation = Orientation::from_quarters(o.orientation.quarters() as i64 + turn);
        targets.push(GoalTarget { x: cell.0, y: cell.1, level: 0, orientation, in_air: false });
    }
    targets
}

fn pick_targets<R: Rng + ?Sized>(config: &GridConfig, state: &WorldState, rng: &mut R) -> Vec<GoalTarget> {
    let lifted = rng.gen_range(0..state.n_objects());
    let mut targets = push_targets(config, state, rng);
    targets[lifted].level = 1;
    targets[lifted].in_air = true;
    targets
}

fn stack_targets<R: Rng + ?Sized>(config: &GridConfig, state: &WorldState, rng: &mut R) -> Vec<GoalTarget> {
    let (x, y) = distinct_cells(config, 1, rng)[0];
    let bottom = rng.gen_range(0..state.n_objects());
    let mut targets: Vec<GoalTarget> = state
        .objects
        .iter()
        .map(|o| GoalTarget { x, y, level: 1, orientation: o.orientation, in_air: false })
        .collect();
    targets[bottom].level = 0;
    targets
}

/// The world state that exactly realizes `goal`: an in-air target is held by a raised
/// gripper at its cell, otherwise the gripper is raised and empty at `gripper_at`.
pub fn realize_goal(goal: &Goal, gripper_at: (usize, usize)) -> WorldState {
    let objects = goal
        .targets
        .iter()
        .map(|t| ObjectState { x: t.x, y: t.y, level: t.level, orientation: t.orientation })
        .collect();
    let held = goal.targets.iter().position(|t| t.in_air);
    let gripper = match held {
        Some(i) => GripperState { x: goal.targets[i].x, y: goal.targets[i].y, z: 1, holding: Some(i) },
        None => GripperState { x: gripper_at.0, y: gripper_at.1, z: 1, holding: None },
    };
    WorldState { gripper, objects, step_count: 0 }
}

/// Two-sided Wilson score interval.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalIndexStats {
    pub attempts: u64,
    pub successes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskName,
    pub episodes: u64,
    pub total_goals: u64,
    pub total_successes: u64,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Entry k covers the k-th goal of each episode.
    pub per_goal_index: Vec<GoalIndexStats>,
}

/// Evaluation settings shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub bob_max_steps_per_object: usize,
    /// Act on the most likely action rather than sampling.
    pub greedy: bool,
    pub seed: u64,
    /// Optimizer rounds between holdout evaluations during training; 0 disables them.
    pub interval: u64,
    pub tasks: Vec<TaskName>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            bob_max_steps_per_object: 80,
            greedy: false,
            seed: 7,
            interval: 50,
            tasks: TaskName::ALL.to_vec(),
        }
    }
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    crate::selfplay::round_seed(seed ^ 0x5E_ED0F_E7A1, episode)
}

/// Multi-goal evaluation: each episode plays up to `goals_per_episode` goals and ends
/// at Bob's first failure. Episodes are seeded individually so results do not depend
/// on thread scheduling.
pub fn evaluate<T: Scalar>(
    bob: &dyn Agent<T>,
    task: &HoldoutTask,
    config: &GridConfig,
    tol: &MatchTolerance,
    rewards: &crate::goal::RewardParams,
    bob_max_steps_per_object: usize,
    n_episodes: usize,
) -> Result<EvalReport, HoldoutError> {
    task.check(config)?;
    let per_episode: Vec<Vec<bool>> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|e| -> Result<Vec<bool>, HoldoutError> {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(task.seed, e));
            let mut env = GridEnv::with_tolerance(config.clone(), *tol)?;
            let mut state = task.sample_initial(config, &mut rng)?;
            let budget = bob_max_steps_per_object * state.n_objects();
            let mut outcomes = Vec::new();
            for _ in 0..task.goals_per_episode {
                let goal = task.generate_goal(config, tol, &state, &mut rng);
                let (traj, success) = run_bob_turn(&mut env, bob, &state, &goal, budget, rewards, &mut rng)?;
                outcomes.push(success);
                if !success {
                    break;
                }
                state = traj.final_state;
                state.step_count = 0;
            }
            Ok(outcomes)
        })
        .collect::<Result<_, _>>()?;

    let mut per_goal_index = vec![GoalIndexStats { attempts: 0, successes: 0 }; task.goals_per_episode];
    for outcomes in &per_episode {
        for (k, &ok) in outcomes.iter().enumerate() {
            per_goal_index[k].attempts += 1;
            per_goal_index[k].successes += ok as u64;
        }
    }
    let total_goals: u64 = per_goal_index.iter().map(|g| g.attempts).sum();
    let total_successes: u64 = per_goal_index.iter().map(|g| g.successes).sum();
    let success_rate = if total_goals == 0 { 0.0 } else { total_successes as f64 / total_goals as f64 };
    let (ci_low, ci_high) = wilson_interval(total_successes, total_goals, Z_99);
    Ok(EvalReport {
        task: task.name,
        episodes: n_episodes as u64,
        total_goals,
        total_successes,
        success_rate,
        ci_low,
        ci_high,
        per_goal_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffMatrix {
    pub alice_labels: Vec<String>,
    pub bob_labels: Vec<String>,
    /// `entries[i][j]`: Bob j's success rate on Alice i's valid goals; `None` when
    /// Alice i never set a goal Bob attempted.
    pub entries: Vec<Vec<Option<f64>>>,
}

/// Cross-play of every Alice snapshot against every Bob snapshot. Rows and columns
/// are ordered by training step.
pub fn payoff_matrix<T: Scalar>(
    alices: &[(String, ParamVector<T>)],
    bobs: &[(String, ParamVector<T>)],
    rules: GameRules<'_>,
    n_episodes: usize,
    seed: u64,
) -> Result<PayoffMatrix, HoldoutError> {
    let mut alices: Vec<&(String, ParamVector<T>)> = alices.iter().collect();
    let mut bobs: Vec<&(String, ParamVector<T>)> = bobs.iter().collect();
    alices.sort_by_key(|(_, p)| p.version);
    bobs.sort_by_key(|(_, p)| p.version);
    let mut entries = Vec::with_capacity(alices.len());
    for (_, alice) in &alices {
        let mut row = Vec::with_capacity(bobs.len());
        for (_, bob) in &bobs {
            row.push(cross_play_rate(alice, bob, rules, n_episodes, seed)?);
        }
        entries.push(row);
    }
    Ok(PayoffMatrix {
        alice_labels: alices.iter().map(|(l, _)| l.clone()).collect(),
        bob_labels: bobs.iter().map(|(l, _)| l.clone()).collect(),
        entries,
    })
}

/// Bob's success rate over attempted goals in self-play games against `alice`.
pub fn cross_play_rate<T: Scalar>(
    alice: &dyn Agent<T>,
    bob: &dyn Agent<T>,
    rules: GameRules<'_>,
    n_episodes: usize,
    seed: u64,
) -> Result<Option<f64>, HoldoutError> {
    let counts: Vec<(usize, usize)> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|e| -> Result<(usize, usize), HoldoutError> {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, e));
            let mut env = GridEnv::with_tolerance(rules.grid.clone(), rules.rewards.tolerance())?;
            let ep = play_episode(&mut env, alice, bob, rules, Harvest::nothing(), &mut rng)?;
            Ok((ep.attempted_goals(), ep.successes()))
        })
        .collect::<Result<_, _>>()?;
    let attempted: usize = counts.iter().map(|c| c.0).sum();
    let successes: usize = counts.iter().map(|c| c.1).sum();
    Ok((attempted > 0).then(|| successes as f64 / attempted as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::goal::{validate_goal, GoalValidity};

    #[test]
    fn names_round_trip() {
        for t in TaskName::ALL {
            assert_eq!(t.as_str().parse::<TaskName>().unwrap(), t);
        }
        assert!(make_task("juggle-3", 0).is_err());
        assert_eq!(TaskName::parse_suite("all").unwrap().len(), 7);
    }

    #[test]
    fn generated_goals_are_valid() {
        let config = GridConfig::default();
        let tol = MatchTolerance::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in TaskName::ALL {
            let task = HoldoutTask::new(name, 0);
            for _ in 0..200 {
                let s = task.sample_initial(&config, &mut rng).unwrap();
                let g = task.generate_goal(&config, &tol, &s, &mut rng);
                let realized = realize_goal(&g, (s.gripper.x, s.gripper.y));
                realized.validate(&config).unwrap();
                assert_eq!(validate_goal(&s, &realized, &config, &tol), GoalValidity::Valid, "{name}");
                if name.kind() == TaskKind::Flip {
                    for (o, t) in s.objects.iter().zip(&g.targets) {
                        assert_eq!((o.x, o.y), (t.x, t.y));
                        assert_ne!(o.orientation, t.orientation);
                    }
                }
                if name.kind() == TaskKind::PickAndPlace {
                    assert_eq!(g.targets.iter().filter(|t| t.in_air).count(), 1);
                }
            }
        }
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(50, 50, Z_99);
        assert!(lo > 0.85 && hi == 1.0);
        let (lo, hi) = wilson_interval(0, 10, Z_99);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.3 && hi < 0.5);
    }
}
