//! Alice behavioral cloning: Alice's trajectories for goals Bob could not solve
//! are relabeled with their own terminal state as the goal and imitated by Bob
//! under a clipped likelihood-ratio loss.

use serde::{Deserialize, Serialize};

use crate::env::{observe, Action, EnvError, GridConfig, Observation};
use crate::goal::{Goal, GoalValidity, MatchTolerance};
use crate::nn::{MultiCategorical, NetError, ParamVector};
use crate::scalar::Scalar;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// `-clip(r, 1-ε, 1+ε)`: no gradient once the ratio leaves the band on either side.
    #[default]
    AsWritten,
    /// `-min(r, clip(r, 1-ε, 1+ε))`: the PPO surrogate with advantage 1.
    PpoMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbcParams {
    pub enabled: bool,
    pub beta: f64,
    pub clip_eps: f64,
    pub clip_mode: ClipMode,
    /// Only failed/skipped goals become demonstrations; off for the no-filter ablation.
    pub filter_failures: bool,
    /// Off for the no-clipping ablation: plain likelihood ratio, unclipped.
    pub clip_enabled: bool,
}

impl Default for AbcParams {
    fn default() -> Self {
        AbcParams {
            enabled: true,
            beta: 0.5,
            clip_eps: 0.2,
            clip_mode: ClipMode::AsWritten,
            filter_failures: true,
            clip_enabled: true,
        }
    }
}

impl AbcParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.beta >= 0.0) {
            return Err("abc.beta must be >= 0".into());
        }
        if !(self.clip_eps > 0.0) {
            return Err("abc.clip_eps must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BobOutcome {
    Success,
    Failure,
    /// Not attempted because Bob already failed earlier in the episode.
    Skipped,
}

impl BobOutcome {
    pub fn failed(self) -> bool {
        !matches!(self, BobOutcome::Success)
    }
}

/// Whether Alice's trajectory for this goal should become a demonstration.
pub fn should_demonstrate(validity: GoalValidity, outcome: BobOutcome) -> bool {
    validity.is_valid_class() && matches!(outcome, BobOutcome::Failure | BobOutcome::Skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStep<T> {
    /// Observation in Bob's layout, conditioned on the relabeled goal.
    pub obs: Observation<T>,
    pub action: Action,
    /// Bob's behavior-policy log-likelihood of Alice's action.
    pub bob_old_log_prob: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration<T> {
    pub goal: Goal,
    pub steps: Vec<DemoStep<T>>,
    /// Observation of Alice's terminal state under the goal.
    pub terminal_obs: Observation<T>,
}

#[derive(Debug, thiserror::Error)]
pub enum AbcError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Re-observes every step of Alice's turn with `goal` appended and scores Alice's
/// actions under Bob's behavior snapshot.
pub fn relabel<T: Scalar>(
    config: &GridConfig,
    tol: &MatchTolerance,
    alice: &Trajectory<T>,
    goal: &Goal,
    bob_old: &ParamVector<T>,
) -> Result<Demonstration<T>, AbcError> {
    let mut steps = Vec::with_capacity(alice.len());
    for s in &alice.steps {
        let obs = observe(config, &s.state, Some(goal), tol)?;
        let out = bob_old.forward(&obs)?;
        let lp = MultiCategorical::new(&out).log_prob(&s.action)?;
        steps.push(DemoStep { obs, action: s.action, bob_old_log_prob: lp });
    }
    let terminal_obs = observe(config, &alice.final_state, Some(goal), tol)?;
    Ok(Demonstration { goal: goal.clone(), steps, terminal_obs })
}

/// Loss of one demonstration sample and its derivative with respect to the new
/// log-probability.
pub fn abc_sample<T: Scalar>(new_log_prob: T, old_log_prob: T, params: &AbcParams) -> (T, T) {
    let r = (new_log_prob - old_log_prob).exp();
    if !params.clip_enabled {
        return (-r, -r);
    }
    let lo = T::of(1.0 - params.clip_eps);
    let hi = T::of(1.0 + params.clip_eps);
    let inside = r > lo && r < hi;
    let clipped = r.max(lo).min(hi);
    match params.clip_mode {
        ClipMode::AsWritten => (-clipped, if inside { -r } else { T::zero() }),
        ClipMode::PpoMin => {
            if r < hi {
                // min(r, clip(r)) = r whenever r < 1 + ε
                (-r, -r)
            } else {
                (-hi, T::zero())
            }
        }
    }
}

/// Mean ABC loss of `batch` under Bob's current parameters.
pub fn abc_loss<T: Scalar>(batch: &[DemoStep<T>], bob: &ParamVector<T>, params: &AbcParams) -> Result<T, NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let mut total = T::zero();
    for d in batch {
        let out = bob.forward(&d.obs)?;
        let lp = MultiCategorical::new(&out).log_prob(&d.action)?;
        total = total + abc_sample(lp, d.bob_old_log_prob, params).0;
    }
    Ok(total / T::of(batch.len() as f64))
}

/// `rl + β·abc`, or just `rl` without demonstrations.
pub fn combined_bob_loss<T: Scalar>(rl_loss: T, abc_loss: Option<T>, beta: f64) -> T {
    match abc_loss {
        Some(a) => rl_loss + T::of(beta) * a,
        None => rl_loss,
    }
}
