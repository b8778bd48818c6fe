#![allow(dead_code)]

use std::sync::Mutex;

use goalplay_core::env::{Action, GridConfig, Observation, WorldState};
use goalplay_core::goal::Goal;
use goalplay_core::nn::NetError;
use goalplay_core::scalar::Scalar;
use goalplay_core::selfplay::{Agent, Decision};
use goalplay_oracles::grid::{bfs_solve, ref_step, BfsOutcome, RefAction, RefGrid, RefObject, RefState, RefTarget};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn ref_grid(config: &GridConfig) -> RefGrid {
    RefGrid { width: config.width, height: config.height, max_stack: config.max_stack_height }
}

pub fn to_ref(state: &WorldState) -> RefState {
    RefState {
        gx: state.gripper.x,
        gy: state.gripper.y,
        gz: state.gripper.z,
        held: state.gripper.holding,
        objs: state
            .objects
            .iter()
            .map(|o| RefObject { x: o.x, y: o.y, level: o.level, quarter: o.orientation.quarters() })
            .collect(),
    }
}

pub fn to_ref_targets(goal: &Goal) -> Vec<RefTarget> {
    goal.targets
        .iter()
        .map(|t| RefTarget { x: t.x, y: t.y, level: t.level, quarter: t.orientation.quarters(), in_air: t.in_air })
        .collect()
}

pub fn to_action(a: RefAction) -> Action {
    Action::from_indices(a).expect("oracle action indices are in range")
}

/// Follows a shortest plan found by the breadth-first oracle, replanning whenever the
/// world is not where the plan expects.
pub struct BfsAgent {
    pub grid: RefGrid,
    plan: Mutex<Option<(Vec<RefTarget>, Vec<RefState>, Vec<RefAction>, usize)>>,
}

impl BfsAgent {
    pub fn new(config: &GridConfig) -> Self {
        BfsAgent { grid: ref_grid(config), plan: Mutex::new(None) }
    }
}

impl<T: Scalar> Agent<T> for BfsAgent {
    fn decide(
        &self,
        _: &Observation<T>,
        state: &WorldState,
        goal: Option<&Goal>,
        _: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError> {
        let zero = Decision { action: Action::NOOP, log_prob: T::zero(), value: T::zero() };
        let Some(goal) = goal else { return Ok(zero) };
        let cur = to_ref(state);
        let targets = to_ref_targets(goal);
        let mut plan = self.plan.lock().unwrap();
        let valid = matches!(&*plan, Some((t, states, _, i)) if *t == targets && states.get(*i) == Some(&cur));
        if !valid {
            *plan = match bfs_solve(&self.grid, &cur, &targets, 2_000_000) {
                BfsOutcome::Found(script) => {
                    let mut states = vec![cur.clone()];
                    for a in &script {
                        let next = ref_step(&self.grid, states.last().unwrap(), *a);
                        states.push(next);
                    }
                    Some((targets, states, script, 0))
                }
                _ => None,
            };
        }
        match plan.as_mut() {
            Some((_, _, script, i)) if *i < script.len() => {
                let a = script[*i];
                *i += 1;
                Ok(Decision { action: to_action(a), log_prob: T::zero(), value: T::zero() })
            }
            _ => Ok(zero),
        }
    }
}

/// Observation of a random state and goal, jittered so that no two object embeddings tie
/// under max pooling.
pub fn random_obs(rng: &mut ChaCha8Rng, n_objects: usize, jitter: f64) -> Observation<f64> {
    let mut config = GridConfig::square(6);
    config.max_objects = n_objects;
    let tol = goalplay_core::goal::MatchTolerance::default();
    let s = goalplay_core::env::sample_initial_state(&config, rng, n_objects).unwrap();
    let g = goalplay_core::env::sample_initial_state(&config, rng, n_objects).unwrap();
    let mut obs: Observation<f64> =
        goalplay_core::env::observe(&config, &s, Some(&Goal::from_state(&g)), &tol).unwrap();
    for v in obs.objects.iter_mut().chain(obs.gripper.iter_mut()) {
        *v += jitter * rng.gen_range(-1.0..1.0);
    }
    obs
}

/// A batch with random observations, actions, old log-probabilities near the
/// current policy's, and random advantages and returns.
pub fn random_batch(params: &goalplay_core::Params, rng: &mut ChaCha8Rng, n: usize) -> goalplay_core::Batch {
    let mut b = goalplay_core::Batch::default();
    for _ in 0..n {
        let k = rng.gen_range(1..=3);
        let obs = random_obs(rng, k, 0.05);
        let out = params.forward(&obs).unwrap();
        let dist = goalplay_core::nn::MultiCategorical::new(&out);
        let action = Action::from_flat(rng.gen_range(0..goalplay_core::env::N_ACTIONS)).unwrap();
        let lp = dist.log_prob(&action).unwrap();
        b.observations.push(obs);
        b.actions.push(action);
        b.rewards.push(rng.gen_range(-1.0..1.0));
        b.old_log_probs.push(lp + rng.gen_range(-0.3..0.3));
        b.old_values.push(out.value);
        b.dones.push(rng.gen_bool(0.1));
        b.advantages.push(rng.gen_range(-2.0..2.0));
        b.returns.push(rng.gen_range(-1.0..3.0));
    }
    b
}

/// Demonstration steps whose behavior log-probabilities sit at controlled ratios
/// `exp(new − old)` from the current policy.
pub fn demos_with_ratios(
    params: &goalplay_core::Params,
    rng: &mut ChaCha8Rng,
    ratios: &[f64],
) -> Vec<goalplay_core::abc::DemoStep<f64>> {
    ratios
        .iter()
        .map(|&r| {
            let k = rng.gen_range(1..=3);
            let obs = random_obs(rng, k, 0.05);
            let out = params.forward(&obs).unwrap();
            let action = Action::from_flat(rng.gen_range(0..goalplay_core::env::N_ACTIONS)).unwrap();
            let lp = goalplay_core::nn::MultiCategorical::new(&out).log_prob(&action).unwrap();
            goalplay_core::abc::DemoStep { obs, action, bob_old_log_prob: lp - r.ln() }
        })
        .collect()
}

/// Goal setter for scripted games: at the start of each turn of `turn_steps` steps it
/// picks a free neighbouring floor cell for object 0 and pushes the object there.
pub struct PushingAlice {
    pub turn_steps: usize,
    config: GridConfig,
    solver: BfsAgent,
    turn: Mutex<(usize, Option<Goal>)>,
}

impl PushingAlice {
    pub fn new(config: &GridConfig, turn_steps: usize) -> Self {
        PushingAlice { turn_steps, config: config.clone(), solver: BfsAgent::new(config), turn: Mutex::new((0, None)) }
    }

    fn pick_target(&self, state: &WorldState) -> Goal {
        let mut goal = Goal::from_state(state);
        let o = &state.objects[0];
        let (w, h) = (self.config.width as i64, self.config.height as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (x, y) = (o.x as i64 + dx, o.y as i64 + dy);
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            if self.config.placement_area.contains(x, y) && state.stack_height(x, y) == 0 {
                goal.targets[0].x = x;
                goal.targets[0].y = y;
                goal.targets[0].level = 0;
                goal.targets[0].in_air = false;
                return goal;
            }
        }
        panic!("object 0 has no free neighbour in {state:?}");
    }
}

impl<T: Scalar> Agent<T> for PushingAlice {
    fn decide(
        &self,
        obs: &Observation<T>,
        state: &WorldState,
        _: Option<&Goal>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision<T>, NetError> {
        let goal = {
            let mut turn = self.turn.lock().unwrap();
            if turn.0.is_multiple_of(self.turn_steps) {
                turn.1 = Some(self.pick_target(state));
            }
            turn.0 += 1;
            turn.1.clone()
        };
        self.solver.decide(obs, state, goal.as_ref(), rng)
    }
}
