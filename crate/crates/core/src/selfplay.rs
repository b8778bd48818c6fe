//! The asymmetric self-play game.
//!
//! An episode alternates turns: Alice acts for a fixed number of steps and her
//! final state becomes a goal; Bob is reset to Alice's starting state and tries
//! to reach it. Up to `max_goals_per_episode` goals are played per episode,
//! Alice always continuing from her own proposal. After Bob's first failure
//! his remaining turns are skipped but Alice keeps proposing, and every failed
//! or skipped goal is relabeled into a demonstration for Bob.

use std::cell::Cell;
use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{relabel, should_demonstrate, AbcError, AbcParams, BobOutcome, DemoStep, Demonstration};
use crate::env::{observe, Action, EnvError, GridConfig, GridEnv, Observation, WorldState};
use crate::goal::{
    alice_turn_reward, bob_step_reward, goal_achieved, validate_goal, AtGoalLatch, Goal, GoalValidity, RewardParams,
};
use crate::nn::{MultiCategorical, NetError, ParamVector};
use crate::ppo::{optimize, AdamState, BcTerm, OptimizeStats, PpoError, PpoHyperParams, TransitionBatch};
use crate::scalar::Scalar;
use crate::trajectory::{Step, Trajectory};

#[derive(Debug, Error)]
pub enum SelfPlayError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("all rollout workers failed: {0}")]
    Workers(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl From<AbcError> for SelfPlayError {
    fn from(e: AbcError) -> Self {
        match e {
            AbcError::Env(e) => SelfPlayError::Env(e),
            AbcError::Net(e) => SelfPlayError::Net(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    /// Alice's goal-setting steps per turn.
    pub alice_turn_steps: usize,
    /// Bob's step budget per object in the scene.
    pub bob_max_steps_per_object: usize,
    pub max_goals_per_episode: usize,
    pub past_opponent_prob: f64,
    /// Object counts sampled uniformly per episode.
    pub n_objects: Vec<usize>,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            alice_turn_steps: 40,
            bob_max_steps_per_object: 80,
            max_goals_per_episode: 5,
            past_opponent_prob: 0.2,
            n_objects: vec![1, 2],
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.alice_turn_steps < 1 || self.bob_max_steps_per_object < 1 {
            return Err("game.alice_turn_steps and game.bob_max_steps_per_object must be >= 1".into());
        }
        if self.max_goals_per_episode < 1 {
            return Err("game.max_goals_per_episode must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.past_opponent_prob) {
            return Err("game.past_opponent_prob must be in [0, 1]".into());
        }
        if self.n_objects.is_empty() || self.n_objects.contains(&0) {
            return Err("game.n_objects must be a nonempty list of positive counts".into());
        }
        Ok(())
    }

    pub fn bob_budget(&self, n_objects: usize) -> usize {
        self.bob_max_steps_per_object * n_objects
    }
}

/// Action choice plus the behavior statistics PPO needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision<T> {
    pub action: Action,
    pub log_prob: T,
    pub value: T,
}

/// Anything that can pick actions in the environment.
pub trait Agent<T: Scalar>: Sync {
    fn decide(
        &self,
        obs: &Observation<T>,
        state: &WorldState,
        goal: Option<&Goal>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError>;
}

impl<T: Scalar> Agent<T> for ParamVector<T> {
    fn decide(
        &self,
        obs: &Observation<T>,
        _: &WorldState,
        _: Option<&Goal>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError> {
        let out = self.forward(obs)?;
        let (action, log_prob) = MultiCategorical::new(&out).sample(rng);
        Ok(Decision { action, log_prob, value: out.value })
    }
}

/// Takes the most likely action instead of sampling.
pub struct Greedy<'a, T>(pub &'a ParamVector<T>);

impl<T: Scalar> Agent<T> for Greedy<'_, T> {
    fn decide(
        &self,
        obs: &Observation<T>,
        _: &WorldState,
        _: Option<&Goal>,
        _: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError> {
        let out = self.0.forward(obs)?;
        let dist = MultiCategorical::new(&out);
        let action = dist.mode();
        Ok(Decision { action, log_prob: dist.log_prob(&action)?, value: out.value })
    }
}

/// Never does anything.
pub struct NoopAgent;

impl<T: Scalar> Agent<T> for NoopAgent {
    fn decide(
        &self,
        _: &Observation<T>,
        _: &WorldState,
        _: Option<&Goal>,
        _: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError> {
        Ok(Decision { action: Action::NOOP, log_prob: T::zero(), value: T::zero() })
    }
}

/// Uniform over all 60 actions.
pub struct RandomAgent;

impl<T: Scalar> Agent<T> for RandomAgent {
    fn decide(
        &self,
        _: &Observation<T>,
        _: &WorldState,
        _: Option<&Goal>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError> {
        let action = Action::from_flat(rng.gen_range(0..crate::env::N_ACTIONS)).unwrap();
        Ok(Decision { action, log_prob: T::of(-(60f64.ln())), value: T::zero() })
    }
}

/// Wraps a closure over (state, goal) as an agent.
pub struct ScriptedAgent<F>(pub F);

impl<T: Scalar, F> Agent<T> for ScriptedAgent<F>
where
    F: Fn(&WorldState, Option<&Goal>) -> Action + Sync,
{
    fn decide(
        &self,
        _: &Observation<T>,
        state: &WorldState,
        goal: Option<&Goal>,
        _: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError> {
        Ok(Decision { action: (self.0)(state, goal), log_prob: T::zero(), value: T::zero() })
    }
}

/// Rules shared by every turn of a game.
#[derive(Debug, Clone, Copy)]
pub struct GameRules<'a> {
    pub grid: &'a GridConfig,
    pub rewards: &'a RewardParams,
    pub game: &'a GameConfig,
    pub abc: &'a AbcParams,
}

/// Alice acts for exactly `steps` steps from the environment's current state.
/// Her observations carry no goal; all rewards start at zero.
pub fn run_alice_turn<T: Scalar>(
    env: &mut GridEnv,
    alice: &dyn Agent<T>,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory<T>, WorldState), SelfPlayError> {
    let mut traj = Vec::with_capacity(steps);
    for _ in 0..steps {
        let state = env.state().clone();
        let obs = env.observe::<T>(None)?;
        let d = alice.decide(&obs, &state, None, rng)?;
        env.step(d.action);
        traj.push(Step { state, obs, action: d.action, reward: 0.0, log_prob: d.log_prob, value: d.value });
    }
    let final_state = env.state().clone();
    Ok((Trajectory { steps: traj, goal: None, final_state: final_state.clone(), success: None }, final_state))
}

/// Bob starts from `start` and acts until every object is at its target or the
/// budget runs out. Rewards come from [`bob_step_reward`].
pub fn run_bob_turn<T: Scalar>(
    env: &mut GridEnv,
    bob: &dyn Agent<T>,
    start: &WorldState,
    goal: &Goal,
    max_steps: usize,
    rewards: &RewardParams,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory<T>, bool), SelfPlayError> {
    env.reset_to(start)?;
    let config = env.config().clone();
    let mut latch = AtGoalLatch::new(goal.n_objects());
    let mut steps = Vec::new();
    let mut success = false;
    for _ in 0..max_steps {
        let state = env.state().clone();
        let obs = env.observe::<T>(Some(goal))?;
        let d = bob.decide(&obs, &state, Some(goal), rng)?;
        let next = env.step(d.action).clone();
        let (reward, new_latch, done) = bob_step_reward(&latch, &config, &next, goal, rewards);
        latch = new_latch;
        steps.push(Step { state, obs, action: d.action, reward, log_prob: d.log_prob, value: d.value });
        if done {
            success = true;
            break;
        }
    }
    let final_state = env.state().clone();
    Ok((Trajectory { steps, goal: Some(goal.clone()), final_state, success: Some(success) }, success))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRecord {
    pub goal: Goal,
    pub validity: GoalValidity,
    pub alice_reward: f64,
    /// `None` for invalid goals, which never reach Bob.
    pub bob_outcome: Option<BobOutcome>,
    pub alice_steps: usize,
    pub bob_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Alice,
    Bob,
}

/// Which buffers an episode feeds.
#[derive(Debug, Clone, Copy)]
pub struct Harvest<'a, T> {
    pub alice: bool,
    pub bob: bool,
    /// Bob's behavior snapshot used to relabel demonstrations; `None` disables them.
    pub relabel_with: Option<&'a ParamVector<T>>,
}

impl<T> Harvest<'_, T> {
    pub fn nothing() -> Self {
        Harvest { alice: false, bob: false, relabel_with: None }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord<T> {
    pub initial_state: WorldState,
    pub goals: Vec<GoalRecord>,
    pub alice_trajectories: Vec<Trajectory<T>>,
    pub bob_trajectories: Vec<Trajectory<T>>,
    pub demonstrations: Vec<Demonstration<T>>,
    /// Side that played a past snapshot, if any.
    pub past_side: Option<Side>,
    /// Start state of each of Alice's turns, parallel to `goals`.
    pub turn_starts: Vec<WorldState>,
}

impl<T> EpisodeRecord<T> {
    /// Goals Bob actually played.
    pub fn attempted_goals(&self) -> usize {
        self.goals.iter().filter(|g| matches!(g.bob_outcome, Some(BobOutcome::Success | BobOutcome::Failure))).count()
    }

    pub fn successes(&self) -> usize {
        self.goals.iter().filter(|g| g.bob_outcome == Some(BobOutcome::Success)).count()
    }

    pub fn valid_goals(&self) -> usize {
        self.goals.iter().filter(|g| g.validity.is_valid_class()).count()
    }
}

/// Plays one multi-goal episode from a freshly sampled initial state.
pub fn play_episode<T: Scalar>(
    env: &mut GridEnv,
    alice: &dyn Agent<T>,
    bob: &dyn Agent<T>,
    rules: GameRules<'_>,
    harvest: Harvest<'_, T>,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord<T>, SelfPlayError> {
    let n_objects = rules.game.n_objects[rng.gen_range(0..rules.game.n_objects.len())];
    let initial = env.reset_with(rng, n_objects)?.clone();
    play_episode_from(env, alice, bob, &initial, rules, harvest, rng)
}

/// [`play_episode`] from a given initial state.
pub fn play_episode_from<T: Scalar>(
    env: &mut GridEnv,
    alice: &dyn Agent<T>,
    bob: &dyn Agent<T>,
    initial: &WorldState,
    rules: GameRules<'_>,
    harvest: Harvest<'_, T>,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeRecord<T>, SelfPlayError> {
    let tol = rules.rewards.tolerance();
    let budget = rules.game.bob_budget(initial.n_objects());
    let mut record = EpisodeRecord {
        initial_state: initial.clone(),
        goals: vec![],
        alice_trajectories: vec![],
        bob_trajectories: vec![],
        demonstrations: vec![],
        past_side: None,
        turn_starts: vec![],
    };
    let mut start = initial.clone();
    let mut bob_failed = false;
    for _ in 0..rules.game.max_goals_per_episode {
        env.reset_to(&start)?;
        let (mut tau_a, proposal) = run_alice_turn(env, alice, rules.game.alice_turn_steps, rng)?;
        let validity = validate_goal(&start, &proposal, rules.grid, &tol);
        let goal = Goal::from_state(&proposal);
        record.turn_starts.push(start.clone());
        if !validity.is_valid_class() {
            // Alice still learns that an invalid proposal is worth nothing.
            if harvest.alice {
                record.alice_trajectories.push(tau_a);
            }
            record.goals.push(GoalRecord {
                goal,
                validity,
                alice_reward: 0.0,
                bob_outcome: None,
                alice_steps: rules.game.alice_turn_steps,
                bob_steps: 0,
            });
            break;
        }
        let (outcome, bob_steps) = if bob_failed {
            (BobOutcome::Skipped, budget)
        } else {
            let (tau_b, success) = run_bob_turn(env, bob, &start, &goal, budget, rules.rewards, rng)?;
            let used = tau_b.len();
            if harvest.bob {
                record.bob_trajectories.push(tau_b);
            }
            bob_failed = !success;
            (if success { BobOutcome::Success } else { BobOutcome::Failure }, if success { used } else { budget })
        };
        let alice_reward = alice_turn_reward(
            validity,
            outcome.failed(),
            rules.game.alice_turn_steps as u64,
            bob_steps as u64,
            rules.rewards,
        );
        if let Some(last) = tau_a.steps.last_mut() {
            last.reward = alice_reward;
        }
        let demo = rules.abc.enabled
            && (should_demonstrate(validity, outcome) || (!rules.abc.filter_failures && validity.is_valid_class()));
        if let (true, Some(bob_old)) = (demo, harvest.relabel_with) {
            record.demonstrations.push(relabel(rules.grid, &tol, &tau_a, &goal, bob_old)?);
        }
        if harvest.alice {
            record.alice_trajectories.push(tau_a);
        }
        record.goals.push(GoalRecord {
            goal,
            validity,
            alice_reward,
            bob_outcome: Some(outcome),
            alice_steps: rules.game.alice_turn_steps,
            bob_steps,
        });
        start = proposal;
    }
    Ok(record)
}

/// Bounded FIFO of past parameter snapshots for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct OpponentPool<T> {
    pub capacity: usize,
    snapshots: VecDeque<ParamVector<T>>,
}

impl<T: Scalar> OpponentPool<T> {
    pub fn new(capacity: usize) -> Self {
        OpponentPool { capacity: capacity.max(1), snapshots: VecDeque::new() }
    }

    /// Adds a snapshot, evicting the oldest when full. `params.version` is the training step.
    pub fn push(&mut self, params: ParamVector<T>) {
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(params);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&ParamVector<T>> {
        if self.snapshots.is_empty() {
            return None;
        }
        self.snapshots.get(rng.gen_range(0..self.snapshots.len()))
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &ParamVector<T>> {
        self.snapshots.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub capacity: usize,
    /// Optimizer rounds between snapshots.
    pub snapshot_interval: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { capacity: 20, snapshot_interval: 50 }
    }
}

thread_local! {
    static IN_SELFPLAY_COLLECTION: Cell<bool> = const { Cell::new(false) };
}

/// True while the current thread is collecting self-play data.
pub fn in_selfplay_collection() -> bool {
    IN_SELFPLAY_COLLECTION.with(|c| c.get())
}

struct CollectionGuard(bool);

impl CollectionGuard {
    fn enter() -> Self {
        CollectionGuard(IN_SELFPLAY_COLLECTION.with(|c| c.replace(true)))
    }
}

impl Drop for CollectionGuard {
    fn drop(&mut self) {
        IN_SELFPLAY_COLLECTION.with(|c| c.set(self.0));
    }
}

/// Merged buffers from one collection round.
#[derive(Debug, Clone)]
pub struct RolloutData<T> {
    pub alice: Vec<Trajectory<T>>,
    pub bob: Vec<Trajectory<T>>,
    pub demonstrations: Vec<Demonstration<T>>,
    pub stats: RolloutStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub episodes: usize,
    pub past_alice_games: usize,
    pub past_bob_games: usize,
    pub goals_set: usize,
    pub invalid_goals: usize,
    pub out_of_zone_goals: usize,
    pub bob_attempts: usize,
    pub bob_successes: usize,
    pub demonstrations: usize,
    pub alice_reward_sum: f64,
    pub workers_used: usize,
}

impl RolloutStats {
    pub fn bob_success_rate(&self) -> f64 {
        if self.bob_attempts == 0 {
            0.0
        } else {
            self.bob_successes as f64 / self.bob_attempts as f64
        }
    }

    pub fn past_game_fraction(&self) -> f64 {
        (self.past_alice_games + self.past_bob_games) as f64 / self.episodes.max(1) as f64
    }

    fn absorb<T>(&mut self, ep: &EpisodeRecord<T>) {
        self.episodes += 1;
        match ep.past_side {
            Some(Side::Alice) => self.past_alice_games += 1,
            Some(Side::Bob) => self.past_bob_games += 1,
            None => {}
        }
        for g in &ep.goals {
            self.goals_set += 1;
            match g.validity {
                GoalValidity::InvalidUnmoved | GoalValidity::InvalidOffTable => self.invalid_goals += 1,
                GoalValidity::ValidOutOfZone => self.out_of_zone_goals += 1,
                GoalValidity::Valid => {}
            }
            self.alice_reward_sum += g.alice_reward;
        }
        self.bob_attempts += ep.attempted_goals();
        self.bob_successes += ep.successes();
        self.demonstrations += ep.demonstrations.len();
    }
}

/// Runs `f(worker, attempt)` on `n_workers` workers in parallel. If any worker panics
/// or errors, the whole round is discarded and rerun with the surviving worker count.
fn run_workers<R, F>(n_workers: usize, f: F) -> Result<Vec<R>, SelfPlayError>
where
    R: Send,
    F: Fn(usize, usize) -> Result<R, SelfPlayError> + Sync,
{
    let mut workers = n_workers;
    let mut attempt = 0;
    let mut failures = Vec::new();
    while workers > 0 {
        let results: Vec<Result<R, String>> = (0..workers)
            .into_par_iter()
            .map(|w| match catch_unwind(AssertUnwindSafe(|| f(w, attempt))) {
                Ok(Ok(r)) => Ok(r),
                Ok(Err(e)) => Err(e.to_string()),
                Err(p) => Err(p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "worker panicked".into())),
            })
            .collect();
        let failed = results.iter().filter(|r| r.is_err()).count();
        if failed == 0 {
            return Ok(results.into_iter().map(|r| r.ok().unwrap()).collect());
        }
        failures.extend(results.into_iter().filter_map(|r| r.err()));
        workers -= failed;
        attempt += 1;
    }
    Err(SelfPlayError::Workers(failures.join("; ")))
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for round `step` of a run seeded with `seed`.
pub fn round_seed(seed: u64, step: u64) -> u64 {
    mix_seed(seed, step)
}

/// Per-round collection settings.
#[derive(Debug, Clone, Copy)]
pub struct CollectSpec {
    pub n_workers: usize,
    pub episodes_per_worker: usize,
    pub seed: u64,
}

/// Parallel episode collection against fixed behavior snapshots.
///
/// With probability `past_opponent_prob` (and a nonempty pool) one side, chosen
/// uniformly, plays a uniformly sampled past snapshot; only the current side's data
/// is kept from such games.
pub fn collect_rollouts<T: Scalar>(
    alice_old: &ParamVector<T>,
    bob_old: &ParamVector<T>,
    alice_pool: &OpponentPool<T>,
    bob_pool: &OpponentPool<T>,
    rules: GameRules<'_>,
    spec: CollectSpec,
) -> Result<RolloutData<T>, SelfPlayError> {
    let tol = rules.rewards.tolerance();
    let per_worker = run_workers(spec.n_workers, |w, attempt| {
        let _guard = CollectionGuard::enter();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(spec.seed, w as u64), attempt as u64));
        let mut env = GridEnv::with_tolerance(rules.grid.clone(), tol)?;
        let mut episodes = Vec::with_capacity(spec.episodes_per_worker);
        for _ in 0..spec.episodes_per_worker {
            let mut past = None;
            if rng.gen::<f64>() < rules.game.past_opponent_prob {
                let side = if rng.gen::<bool>() { Side::Alice } else { Side::Bob };
                let pool = if side == Side::Alice { alice_pool } else { bob_pool };
                if let Some(p) = pool.sample(&mut rng) {
                    past = Some((side, p));
                }
            }
            let (alice, bob, harvest): (&dyn Agent<T>, &dyn Agent<T>, _) = match past {
                None => (alice_old, bob_old, Harvest { alice: true, bob: true, relabel_with: Some(bob_old) }),
                Some((Side::Alice, p)) => {
                    (p, bob_old, Harvest { alice: false, bob: true, relabel_with: Some(bob_old) })
                }
                Some((Side::Bob, p)) => (alice_old, p, Harvest { alice: true, bob: false, relabel_with: None }),
            };
            let mut ep = play_episode(&mut env, alice, bob, rules, harvest, &mut rng)?;
            ep.past_side = past.map(|(s, _)| s);
            episodes.push(ep);
        }
        Ok(episodes)
    })?;
    let mut data = RolloutData { alice: vec![], bob: vec![], demonstrations: vec![], stats: RolloutStats::default() };
    data.stats.workers_used = per_worker.len();
    for ep in per_worker.into_iter().flatten() {
        data.stats.absorb(&ep);
        data.alice.extend(ep.alice_trajectories);
        data.bob.extend(ep.bob_trajectories);
        data.demonstrations.extend(ep.demonstrations);
    }
    Ok(data)
}

/// Everything a self-play run needs besides its network architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfPlaySettings {
    pub grid: GridConfig,
    pub rewards: RewardParams,
    pub game: GameConfig,
    pub abc: AbcParams,
    pub ppo: PpoHyperParams,
    pub pool: PoolConfig,
    pub n_workers: usize,
    pub episodes_per_worker: usize,
    pub seed: u64,
}

impl SelfPlaySettings {
    pub fn rules(&self) -> GameRules<'_> {
        GameRules { grid: &self.grid, rewards: &self.rewards, game: &self.game, abc: &self.abc }
    }
}

/// Per-round summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub step: u64,
    pub rollout: RolloutStats,
    pub alice_transitions: usize,
    pub bob_transitions: usize,
    pub bc_transitions: usize,
    pub alice: Option<OptimizeStats>,
    pub bob: Option<OptimizeStats>,
    /// Diagnostics of updates skipped because of non-finite losses.
    pub skipped_updates: Vec<String>,
}

/// Optimizer state of both agents plus their opponent pools.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfPlayTrainer<T> {
    pub settings: SelfPlaySettings,
    pub alice: ParamVector<T>,
    pub bob: ParamVector<T>,
    pub alice_adam: AdamState<T>,
    pub bob_adam: AdamState<T>,
    pub alice_pool: OpponentPool<T>,
    pub bob_pool: OpponentPool<T>,
    pub step: u64,
}

impl<T: Scalar> SelfPlayTrainer<T> {
    pub fn new(settings: SelfPlaySettings, arch: &crate::nn::ArchitectureSpec) -> Result<Self, SelfPlayError> {
        settings.grid.validate()?;
        settings.game.validate().map_err(SelfPlayError::Config)?;
        settings.ppo.validate().map_err(SelfPlayError::Config)?;
        settings.abc.validate().map_err(SelfPlayError::Config)?;
        settings.rewards.validate().map_err(SelfPlayError::Config)?;
        if settings.game.n_objects.iter().any(|&n| n > settings.grid.max_objects) {
            return Err(SelfPlayError::Config("game.n_objects exceeds grid.max_objects".into()));
        }
        let alice = crate::nn::init_params::<T>(arch, mix_seed(settings.seed, 0xA11CE))?;
        let bob = crate::nn::init_params::<T>(arch, mix_seed(settings.seed, 0xB0B))?;
        let n = alice.len();
        let cap = settings.pool.capacity;
        Ok(SelfPlayTrainer {
            settings,
            alice,
            bob,
            alice_adam: AdamState::new(n),
            bob_adam: AdamState::new(n),
            alice_pool: OpponentPool::new(cap),
            bob_pool: OpponentPool::new(cap),
            step: 0,
        })
    }

    /// One iteration: snapshot, collect, update Alice with PPO and Bob with PPO + ABC.
    /// Buffers live only for the duration of the round.
    pub fn round(&mut self) -> Result<RoundStats, SelfPlayError> {
        let s = &self.settings;
        let alice_old = self.alice.clone();
        let bob_old = self.bob.clone();
        let seed = round_seed(s.seed, self.step);
        let data = collect_rollouts(
            &alice_old,
            &bob_old,
            &self.alice_pool,
            &self.bob_pool,
            s.rules(),
            CollectSpec { n_workers: s.n_workers, episodes_per_worker: s.episodes_per_worker, seed },
        )?;
        debug_assert!(data.demonstrations.iter().all(|d| d.goal.source == crate::goal::GoalSource::Alice));
        let mut stats = RoundStats { step: self.step + 1, rollout: data.stats.clone(), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0971));

        let alice_batch = TransitionBatch::from_trajectories(&data.alice, s.ppo.gamma, s.ppo.gae_lambda);
        stats.alice_transitions = alice_batch.len();
        if !alice_batch.is_empty() {
            match optimize(&self.alice, &alice_batch, None, &s.ppo, &mut self.alice_adam, &mut rng) {
                Ok((p, st)) => {
                    self.alice = p;
                    stats.alice = Some(st);
                }
                Err(e) => stats.skipped_updates.push(format!("alice: {e}")),
            }
        }

        let bob_batch = TransitionBatch::from_trajectories(&data.bob, s.ppo.gamma, s.ppo.gae_lambda);
        let demos: Vec<DemoStep<T>> = data.demonstrations.into_iter().flat_map(|d| d.steps).collect();
        stats.bob_transitions = bob_batch.len();
        stats.bc_transitions = demos.len();
        if !bob_batch.is_empty() {
            let bc = BcTerm { demos: &demos, params: &s.abc };
            match optimize(&self.bob, &bob_batch, Some(bc), &s.ppo, &mut self.bob_adam, &mut rng) {
                Ok((p, st)) => {
                    self.bob = p;
                    stats.bob = Some(st);
                }
                Err(e) => stats.skipped_updates.push(format!("bob: {e}")),
            }
        }

        self.step += 1;
        self.alice.version = self.step;
        self.bob.version = self.step;
        if self.step.is_multiple_of(self.settings.pool.snapshot_interval.max(1)) {
            self.alice_pool.push(self.alice.clone());
            self.bob_pool.push(self.bob.clone());
        }
        Ok(stats)
    }
}

/// Whether Bob's policy already satisfies `goal` from `start` (used to assert that
/// valid goals are never trivially solved).
pub fn trivially_solved(config: &GridConfig, rewards: &RewardParams, start: &WorldState, goal: &Goal) -> bool {
    goal_achieved(config, start, goal, &rewards.tolerance()).unwrap_or(false)
}

/// Bob's observation of `state` under `goal`, for callers outside a turn.
pub fn bob_observation<T: Scalar>(
    config: &GridConfig,
    rewards: &RewardParams,
    state: &WorldState,
    goal: &Goal,
) -> Result<Observation<T>, EnvError> {
    observe(config, state, Some(goal), &rewards.tolerance())
}
