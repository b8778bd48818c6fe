use crate::env::{Action, Observation, WorldState};
use crate::goal::Goal;
use crate::scalar::Scalar;

/// One environment step as seen by the acting policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<T> {
    /// State the action was taken in.
    pub state: WorldState,
    pub obs: Observation<T>,
    pub action: Action,
    pub reward: f64,
    /// Behavior-policy log-likelihood of `action`.
    pub log_prob: T,
    pub value: T,
}

/// A turn played by one agent. Every trajectory ends in a terminal step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub steps: Vec<Step<T>>,
    /// The goal Bob was conditioned on; `None` for Alice.
    pub goal: Option<Goal>,
    pub final_state: WorldState,
    /// Bob's outcome; `None` for Alice.
    pub success: Option<bool>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}
