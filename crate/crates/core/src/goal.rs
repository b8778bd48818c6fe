//! Goals, goal validation, success predicates and the reward structure for
//! both agents.

use serde::{Deserialize, Serialize};

use crate::env::{EnvError, GridConfig, Orientation, WorldState};

/// Target pose of one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalTarget {
    pub x: usize,
    pub y: usize,
    pub level: usize,
    pub orientation: Orientation,
    /// The object must be held by a raised gripper.
    pub in_air: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalSource {
    Alice,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    pub targets: Vec<GoalTarget>,
    pub source: GoalSource,
    /// Multiplier on the rotation error before thresholding; 1 except under a curriculum.
    #[serde(default = "one")]
    pub rotation_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Goal {
    /// The goal "be exactly in `state`": how Alice's terminal state becomes Bob's goal.
    pub fn from_state(state: &WorldState) -> Goal {
        Goal {
            targets: (0..state.n_objects()).map(|i| target_of(state, i)).collect(),
            source: GoalSource::Alice,
            rotation_weight: 1.0,
        }
    }

    pub fn with_source(mut self, source: GoalSource) -> Goal {
        self.source = source;
        self
    }

    pub fn n_objects(&self) -> usize {
        self.targets.len()
    }
}

/// Current pose of object `i` expressed as a target.
pub fn target_of(state: &WorldState, i: usize) -> GoalTarget {
    let o = &state.objects[i];
    GoalTarget { x: o.x, y: o.y, level: o.level, orientation: o.orientation, in_air: state.in_air(i) }
}

/// Success thresholds: Euclidean distance between object centers and minimal rotation angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchTolerance {
    /// meters
    pub pos_threshold: f64,
    /// radians
    pub rot_threshold: f64,
}

impl Default for MatchTolerance {
    fn default() -> Self {
        MatchTolerance { pos_threshold: 0.04, rot_threshold: 0.2 }
    }
}

/// Whether object `i` of `state` is within tolerance of `target`.
///
/// Positions are compared in 3D (cells plus stack level, scaled by the cell size), so with
/// 0.05 m cells and a 0.04 m threshold this is an exact cell-and-level match.
pub fn object_at_goal(
    config: &GridConfig,
    state: &WorldState,
    i: usize,
    target: &GoalTarget,
    rotation_weight: f64,
    tol: &MatchTolerance,
) -> bool {
    let o = &state.objects[i];
    let dx = o.x as f64 - target.x as f64;
    let dy = o.y as f64 - target.y as f64;
    let dz = o.level as f64 - target.level as f64;
    let dist = config.cell_size * (dx * dx + dy * dy + dz * dz).sqrt();
    let angle = o.orientation.angle_to(target.orientation);
    dist <= tol.pos_threshold && rotation_weight * angle <= tol.rot_threshold && state.in_air(i) == target.in_air
}

pub fn goal_achieved(
    config: &GridConfig,
    state: &WorldState,
    goal: &Goal,
    tol: &MatchTolerance,
) -> Result<bool, EnvError> {
    check_counts(state, goal)?;
    Ok(goal.targets.iter().enumerate().all(|(i, t)| object_at_goal(config, state, i, t, goal.rotation_weight, tol)))
}

fn check_counts(state: &WorldState, goal: &Goal) -> Result<(), EnvError> {
    if state.n_objects() != goal.n_objects() {
        return Err(EnvError::CountMismatch { state: state.n_objects(), goal: goal.n_objects() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalValidity {
    InvalidUnmoved,
    InvalidOffTable,
    ValidOutOfZone,
    Valid,
}

impl GoalValidity {
    /// Valid or out-of-zone: the goal is handed to Bob.
    pub fn is_valid_class(self) -> bool {
        matches!(self, GoalValidity::Valid | GoalValidity::ValidOutOfZone)
    }

    pub const ALL: [GoalValidity; 4] = [
        GoalValidity::InvalidUnmoved,
        GoalValidity::InvalidOffTable,
        GoalValidity::ValidOutOfZone,
        GoalValidity::Valid,
    ];
}

/// Classifies Alice's proposal `s_t` relative to her start state `s0`.
///
/// Checks run in a fixed order: nothing moved, something off the table, something
/// outside the placement area. Objects cannot leave the grid, so the off-table check
/// never fires here, but it stays in sequence.
pub fn validate_goal(s0: &WorldState, s_t: &WorldState, config: &GridConfig, tol: &MatchTolerance) -> GoalValidity {
    let moved = (0..s0.n_objects().min(s_t.n_objects()))
        .any(|i| !object_at_goal(config, s_t, i, &target_of(s0, i), 1.0, tol))
        || s0.n_objects() != s_t.n_objects();
    if !moved {
        return GoalValidity::InvalidUnmoved;
    }
    if s_t.objects.iter().any(|o| !config.in_bounds(o.x, o.y)) {
        return GoalValidity::InvalidOffTable;
    }
    if s_t.objects.iter().any(|o| !config.placement_area.contains(o.x, o.y)) {
        return GoalValidity::ValidOutOfZone;
    }
    GoalValidity::Valid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AliceRewardMode {
    /// Bonus for a valid goal plus a game reward when Bob fails.
    #[default]
    Game,
    /// Scaled difference between Bob's and Alice's step counts.
    Timestep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub valid_goal_bonus: f64,
    pub bob_failed_bonus: f64,
    pub out_of_zone_penalty: f64,
    pub per_object_reward: f64,
    pub bob_success_bonus: f64,
    pub pos_threshold: f64,
    pub rot_threshold: f64,
    pub timestep_reward_scale: f64,
    pub alice_reward: AliceRewardMode,
    /// Apply the out-of-zone penalty under [`AliceRewardMode::Timestep`] as well.
    pub timestep_out_of_zone_penalty: bool,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            valid_goal_bonus: 1.0,
            bob_failed_bonus: 5.0,
            out_of_zone_penalty: 3.0,
            per_object_reward: 1.0,
            bob_success_bonus: 5.0,
            pos_threshold: 0.04,
            rot_threshold: 0.2,
            timestep_reward_scale: 0.01,
            alice_reward: AliceRewardMode::Game,
            timestep_out_of_zone_penalty: true,
        }
    }
}

impl RewardParams {
    pub fn tolerance(&self) -> MatchTolerance {
        MatchTolerance { pos_threshold: self.pos_threshold, rot_threshold: self.rot_threshold }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mags = [
            self.valid_goal_bonus,
            self.bob_failed_bonus,
            self.out_of_zone_penalty,
            self.per_object_reward,
            self.bob_success_bonus,
            self.timestep_reward_scale,
        ];
        if mags.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err("reward magnitudes must be finite and nonnegative".into());
        }
        if !(self.pos_threshold > 0.0 && self.rot_threshold > 0.0) {
            return Err("match thresholds must be positive".into());
        }
        Ok(())
    }
}

/// Per-object at-goal state carried across the steps of one Bob turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtGoalLatch(pub Vec<bool>);

impl AtGoalLatch {
    pub fn new(n_objects: usize) -> Self {
        AtGoalLatch(vec![false; n_objects])
    }

    /// Latch reflecting the objects already at goal in `state`.
    pub fn from_state(config: &GridConfig, state: &WorldState, goal: &Goal, tol: &MatchTolerance) -> Self {
        AtGoalLatch(
            goal.targets
                .iter()
                .enumerate()
                .map(|(i, t)| object_at_goal(config, state, i, t, goal.rotation_weight, tol))
                .collect(),
        )
    }
}

/// Bob's reward for arriving in `state`: +1 per object entering its target, −1 per
/// object leaving it, and the success bonus once every object is at its target.
pub fn bob_step_reward(
    prev: &AtGoalLatch,
    config: &GridConfig,
    state: &WorldState,
    goal: &Goal,
    params: &RewardParams,
) -> (f64, AtGoalLatch, bool) {
    let tol = params.tolerance();
    let now = AtGoalLatch::from_state(config, state, goal, &tol);
    let mut reward = 0.0;
    for (was, is) in prev.0.iter().zip(&now.0) {
        match (was, is) {
            (false, true) => reward += params.per_object_reward,
            (true, false) => reward -= params.per_object_reward,
            _ => {}
        }
    }
    let done = now.0.iter().all(|&b| b);
    if done {
        reward += params.bob_success_bonus;
    }
    (reward, now, done)
}

/// Alice's reward for one goal under the game reward.
pub fn alice_goal_reward(validity: GoalValidity, bob_failed: bool, params: &RewardParams) -> f64 {
    let game = if bob_failed { params.bob_failed_bonus } else { 0.0 };
    match validity {
        GoalValidity::InvalidUnmoved | GoalValidity::InvalidOffTable => 0.0,
        GoalValidity::Valid => params.valid_goal_bonus + game,
        GoalValidity::ValidOutOfZone => params.valid_goal_bonus - params.out_of_zone_penalty + game,
    }
}

/// Time-margin reward for the timestep ablation; a failed Bob counts as its step budget.
pub fn alice_timestep_reward(alice_steps: u64, bob_steps_or_max: u64, params: &RewardParams) -> f64 {
    params.timestep_reward_scale * bob_steps_or_max.saturating_sub(alice_steps) as f64
}

/// Alice's final-step reward for one goal under the configured reward mode.
pub fn alice_turn_reward(
    validity: GoalValidity,
    bob_failed: bool,
    alice_steps: u64,
    bob_steps_or_max: u64,
    params: &RewardParams,
) -> f64 {
    match params.alice_reward {
        AliceRewardMode::Game => alice_goal_reward(validity, bob_failed, params),
        AliceRewardMode::Timestep => match validity {
            GoalValidity::InvalidUnmoved | GoalValidity::InvalidOffTable => 0.0,
            GoalValidity::Valid | GoalValidity::ValidOutOfZone => {
                let penalty = if validity == GoalValidity::ValidOutOfZone && params.timestep_out_of_zone_penalty {
                    params.out_of_zone_penalty
                } else {
                    0.0
                };
                params.valid_goal_bonus - penalty + alice_timestep_reward(alice_steps, bob_steps_or_max, params)
            }
        },
    }
}
