//! Direct goal-conditioned training on a mixture of holdout-style goals, with
//! hand-designed curricula driven by a fixed-increment domain randomization
//! controller.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_initial_state, GridConfig, GridEnv, WorldState};
use crate::goal::{Goal, GoalTarget, MatchTolerance, RewardParams};
use crate::holdout::{generate_task_goal, TaskKind};
use crate::nn::{init_params, ArchitectureSpec, ParamVector};
use crate::ppo::{optimize, AdamState, OptimizeStats, PpoHyperParams, TransitionBatch};
use crate::scalar::Scalar;
use crate::selfplay::{round_seed, run_bob_turn, SelfPlayError};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdrParamKind {
    GoalDistanceRatio,
    GoalRotationWeight,
    PickupProba,
    StackProba,
}

impl AdrParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdrParamKind::GoalDistanceRatio => "goal_distance_ratio",
            AdrParamKind::GoalRotationWeight => "goal_rotation_weight",
            AdrParamKind::PickupProba => "pickup_proba",
            AdrParamKind::StackProba => "stack_proba",
        }
    }

    pub fn bounds(self) -> (f64, f64) {
        match self {
            AdrParamKind::GoalDistanceRatio | AdrParamKind::GoalRotationWeight => (0.0, 1.0),
            AdrParamKind::PickupProba | AdrParamKind::StackProba => (0.0, 0.5),
        }
    }
}

/// Controller settings shared by every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FadrConfig {
    pub queue_len: usize,
    pub threshold: f64,
    /// Promotion step as a fraction of the parameter's range.
    pub increment: f64,
}

impl Default for FadrConfig {
    fn default() -> Self {
        FadrConfig { queue_len: 40, threshold: 0.7, increment: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdrParam {
    pub kind: AdrParamKind,
    pub lo: f64,
    pub hi: f64,
    pub current_max: f64,
    pub queue: VecDeque<f64>,
    pub fadr: FadrConfig,
}

impl AdrParam {
    pub fn new(kind: AdrParamKind, fadr: FadrConfig) -> Self {
        let (lo, hi) = kind.bounds();
        AdrParam { kind, lo, hi, current_max: lo, queue: VecDeque::new(), fadr }
    }

    /// Records a score from an episode where this parameter sat at its boundary.
    /// Returns true when the boundary was promoted.
    pub fn fadr_update(&mut self, score: f64) -> bool {
        self.queue.push_back(score.clamp(0.0, 1.0));
        while self.queue.len() > self.fadr.queue_len {
            self.queue.pop_front();
        }
        if self.queue.len() < self.fadr.queue_len {
            return false;
        }
        let mean = self.queue.iter().sum::<f64>() / self.queue.len() as f64;
        if mean > self.fadr.threshold {
            self.current_max = (self.current_max + self.fadr.increment * (self.hi - self.lo)).min(self.hi);
            self.queue.clear();
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    NoCurriculum,
    Distance,
    Distribution,
    Full,
}

impl BaselineVariant {
    pub const ALL: [BaselineVariant; 4] = [
        BaselineVariant::NoCurriculum,
        BaselineVariant::Distance,
        BaselineVariant::Distribution,
        BaselineVariant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineVariant::NoCurriculum => "no_curriculum",
            BaselineVariant::Distance => "distance",
            BaselineVariant::Distribution => "distribution",
            BaselineVariant::Full => "full",
        }
    }

    pub fn active_params(self) -> &'static [AdrParamKind] {
        use AdrParamKind::*;
        match self {
            BaselineVariant::NoCurriculum => &[],
            BaselineVariant::Distance => &[GoalDistanceRatio, GoalRotationWeight],
            BaselineVariant::Distribution => &[PickupProba, StackProba],
            BaselineVariant::Full => &[GoalDistanceRatio, GoalRotationWeight, PickupProba, StackProba],
        }
    }

    fn interpolates(self) -> bool {
        matches!(self, BaselineVariant::Distance | BaselineVariant::Full)
    }

    fn adaptive_mixture(self) -> bool {
        matches!(self, BaselineVariant::Distribution | BaselineVariant::Full)
    }
}

impl fmt::Display for BaselineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BaselineVariant::ALL.into_iter().find(|v| v.as_str() == s || v.as_str().replace('_', "-") == s).ok_or_else(
            || format!("unknown baseline variant '{s}' (expected no_curriculum, distance, distribution or full)"),
        )
    }
}

/// Fixed mixture weights for push/flip, pick-and-place and stack goals.
pub const FIXED_MIXTURE: [f64; 3] = [0.5, 0.35, 0.15];

/// The active parameters of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdrSet {
    pub params: Vec<AdrParam>,
}

impl AdrSet {
    pub fn for_variant(variant: BaselineVariant, fadr: &FadrConfig) -> Self {
        AdrSet { params: variant.active_params().iter().map(|&k| AdrParam::new(k, fadr.clone())).collect() }
    }

    pub fn get(&self, kind: AdrParamKind) -> Option<&AdrParam> {
        self.params.iter().find(|p| p.kind == kind)
    }

    /// One parameter (uniformly chosen) sits at its boundary; the rest are uniform
    /// in `[lo, current_max]`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AdrDraw {
        if self.params.is_empty() {
            return AdrDraw { values: vec![], boundary: None };
        }
        let boundary = rng.gen_range(0..self.params.len());
        let values = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let v = if i == boundary || p.current_max <= p.lo {
                    p.current_max
                } else {
                    rng.gen_range(p.lo..=p.current_max)
                };
                (p.kind, v)
            })
            .collect();
        AdrDraw { values, boundary: Some(boundary) }
    }
}

/// Parameter values used for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AdrDraw {
    pub values: Vec<(AdrParamKind, f64)>,
    /// Index into [`AdrSet::params`] of the parameter held at its boundary.
    pub boundary: Option<usize>,
}

impl AdrDraw {
    /// Pins every parameter at the given values (no boundary bookkeeping).
    pub fn fixed(values: Vec<(AdrParamKind, f64)>) -> Self {
        AdrDraw { values, boundary: None }
    }

    pub fn value(&self, kind: AdrParamKind) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v)
    }
}

/// Nearest integer to `d`, with exact halves rounded toward zero.
fn round_ties_toward_zero(d: f64) -> i64 {
    let m = d.abs();
    let r = (m - 0.5).ceil().max(0.0);
    (r as i64) * if d < 0.0 { -1 } else { 1 }
}

fn interpolate(from: usize, to: usize, ratio: f64) -> usize {
    let d = (to as f64 - from as f64) * ratio;
    (from as i64 + round_ties_toward_zero(d)) as usize
}

/// Pulls every target of `raw` toward the initial pose by `ratio` and relaxes rotation
/// matching by `rotation_weight`. If the interpolated targets cannot coexist (two
/// objects on one slot, or a target floating above an empty cell) the raw targets
/// are kept.
pub fn curriculum_goal(initial: &WorldState, raw: &Goal, ratio: f64, rotation_weight: f64) -> Goal {
    let ratio = ratio.clamp(0.0, 1.0);
    let targets: Vec<GoalTarget> = raw
        .targets
        .iter()
        .zip(&initial.objects)
        .map(|(t, o)| {
            let x = interpolate(o.x, t.x, ratio);
            let y = interpolate(o.y, t.y, ratio);
            let level = interpolate(o.level, t.level, ratio);
            let in_air = t.in_air && level >= 1;
            GoalTarget { x, y, level: if t.in_air && !in_air { 0 } else { level }, orientation: t.orientation, in_air }
        })
        .collect();
    let targets = if consistent(&targets) { targets } else { raw.targets.clone() };
    Goal { targets, source: raw.source, rotation_weight }
}

fn consistent(targets: &[GoalTarget]) -> bool {
    let resting: Vec<&GoalTarget> = targets.iter().filter(|t| !t.in_air).collect();
    for (i, a) in resting.iter().enumerate() {
        for b in &resting[i + 1..] {
            if (a.x, a.y, a.level) == (b.x, b.y, b.level) {
                return false;
            }
        }
        if a.level > 0 && !resting.iter().any(|b| (b.x, b.y) == (a.x, a.y) && b.level + 1 == a.level) {
            return false;
        }
    }
    targets.iter().filter(|t| t.in_air).count() <= 1
}

/// One sampled training task.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub initial: WorldState,
    pub kind: TaskKind,
    pub raw_goal: Goal,
    pub goal: Goal,
}

/// Draws a task kind, an initial state and a goal for `variant` under `draw`.
pub fn sample_mixture_goal<R: Rng + ?Sized>(
    variant: BaselineVariant,
    draw: &AdrDraw,
    config: &GridConfig,
    tol: &MatchTolerance,
    n_objects: &[usize],
    rng: &mut R,
) -> Result<MixtureSample, SelfPlayError> {
    let u: f64 = rng.gen();
    let (p_pick, p_stack) = if variant.adaptive_mixture() {
        (draw.value(AdrParamKind::PickupProba).unwrap_or(0.0), draw.value(AdrParamKind::StackProba).unwrap_or(0.0))
    } else {
        (FIXED_MIXTURE[1], FIXED_MIXTURE[2])
    };
    let stack_possible = config.max_objects >= 2 && config.max_stack_height >= 2;
    let kind = if u < p_pick {
        TaskKind::PickAndPlace
    } else if u < p_pick + p_stack && stack_possible {
        TaskKind::Stack
    } else if rng.gen::<bool>() {
        TaskKind::Push
    } else {
        TaskKind::Flip
    };
    let n = if kind == TaskKind::Stack { 2 } else { n_objects[rng.gen_range(0..n_objects.len())] };
    let initial = sample_initial_state(config, rng, n)?;
    let raw_goal = generate_task_goal(kind, config, tol, &initial, rng);
    let goal = if variant.interpolates() {
        curriculum_goal(
            &initial,
            &raw_goal,
            draw.value(AdrParamKind::GoalDistanceRatio).unwrap_or(1.0),
            draw.value(AdrParamKind::GoalRotationWeight).unwrap_or(1.0),
        )
    } else {
        raw_goal.clone()
    };
    Ok(MixtureSample { initial, kind, raw_goal, goal })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub variant: BaselineVariant,
    pub fadr: FadrConfig,
    /// Single-goal episodes collected per worker and round.
    pub episodes_per_worker: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { variant: BaselineVariant::NoCurriculum, fadr: FadrConfig::default(), episodes_per_worker: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSettings {
    pub grid: GridConfig,
    pub rewards: RewardParams,
    pub ppo: PpoHyperParams,
    pub baseline: BaselineConfig,
    pub bob_max_steps_per_object: usize,
    pub n_objects: Vec<usize>,
    pub n_workers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineRoundStats {
    pub step: u64,
    pub episodes: usize,
    pub successes: usize,
    pub transitions: usize,
    pub promotions: Vec<String>,
    pub adr: Vec<(AdrParamKind, f64)>,
    pub update: Option<OptimizeStats>,
    pub skipped_update: Option<String>,
}

/// A single goal-conditioned policy trained with PPO on the goal mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTrainer<T> {
    pub settings: BaselineSettings,
    pub policy: ParamVector<T>,
    pub adam: AdamState<T>,
    pub adr: AdrSet,
    pub step: u64,
}

impl<T: Scalar> BaselineTrainer<T> {
    pub fn new(settings: BaselineSettings, arch: &ArchitectureSpec) -> Result<Self, SelfPlayError> {
        settings.grid.validate()?;
        settings.ppo.validate().map_err(SelfPlayError::Config)?;
        if settings.n_objects.is_empty() || settings.n_objects.iter().any(|&n| n == 0 || n > settings.grid.max_objects)
        {
            return Err(SelfPlayError::Config("n_objects must be nonempty and within grid.max_objects".into()));
        }
        let policy = init_params::<T>(arch, round_seed(settings.seed, 0xBA5E))?;
        let adr = AdrSet::for_variant(settings.baseline.variant, &settings.baseline.fadr);
        let n = policy.len();
        Ok(BaselineTrainer { settings, policy, adam: AdamState::new(n), adr, step: 0 })
    }

    pub fn round(&mut self) -> Result<BaselineRoundStats, SelfPlayError> {
        let s = &self.settings;
        let seed = round_seed(s.seed ^ 0xBA5E_11E5, self.step);
        let tol = s.rewards.tolerance();
        let policy = &self.policy;
        let adr = &self.adr;
        let worker = |w: usize| -> Result<Vec<(Trajectory<T>, Option<usize>, bool)>, SelfPlayError> {
            let mut rng = ChaCha8Rng::seed_from_u64(round_seed(seed, w as u64));
            let mut env = GridEnv::with_tolerance(s.grid.clone(), tol)?;
            let mut out = Vec::new();
            for _ in 0..s.baseline.episodes_per_worker {
                let draw = adr.draw(&mut rng);
                let sample = sample_mixture_goal(s.baseline.variant, &draw, &s.grid, &tol, &s.n_objects, &mut rng)?;
                let budget = s.bob_max_steps_per_object * sample.initial.n_objects();
                let (traj, ok) =
                    run_bob_turn(&mut env, policy, &sample.initial, &sample.goal, budget, &s.rewards, &mut rng)?;
                out.push((traj, draw.boundary, ok));
            }
            Ok(out)
        };
        use rayon::prelude::*;
        let episodes: Vec<_> = (0..s.n_workers.max(1))
            .into_par_iter()
            .map(worker)
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();

        let mut stats = BaselineRoundStats { step: self.step + 1, episodes: episodes.len(), ..Default::default() };
        stats.successes = episodes.iter().filter(|e| e.2).count();
        let batch = TransitionBatch::from_trajectories(episodes.iter().map(|e| &e.0), s.ppo.gamma, s.ppo.gae_lambda);
        stats.transitions = batch.len();
        if !batch.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(round_seed(seed, 0x0971));
            match optimize(&self.policy, &batch, None, &s.ppo, &mut self.adam, &mut rng) {
                Ok((p, st)) => {
                    self.policy = p;
                    stats.update = Some(st);
                }
                Err(e) => stats.skipped_update = Some(e.to_string()),
            }
        }
        for (_, boundary, ok) in &episodes {
            if let Some(b) = boundary {
                if self.adr.params[*b].fadr_update(if *ok { 1.0 } else { 0.0 }) {
                    stats.promotions.push(self.adr.params[*b].kind.as_str().to_string());
                }
            }
        }
        stats.adr = self.adr.params.iter().map(|p| (p.kind, p.current_max)).collect();
        self.step += 1;
        self.policy.version = self.step;
        Ok(stats)
    }
}
