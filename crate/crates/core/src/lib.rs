//! Asymmetric self-play for goal discovery on a grid tabletop.
//!
//! Alice proposes goals by acting in the environment, Bob learns to reach them,
//! and Bob's skill is measured zero-shot on held-out manipulation tasks. The
//! numeric core is generic over [`scalar::Scalar`]; the aliases below fix it to
//! `f64`, which is what the command-line tools use.

pub mod abc;
pub mod curriculum;
pub mod env;
pub mod goal;
pub mod holdout;
pub mod nn;
pub mod persist;
pub mod ppo;
pub mod run;
pub mod scalar;
pub mod selfplay;
pub mod trajectory;

pub type Params = nn::ParamVector<f64>;
pub type Obs = env::Observation<f64>;
pub type Adam = ppo::AdamState<f64>;
pub type Batch = ppo::TransitionBatch<f64>;
pub type Demo = abc::Demonstration<f64>;
pub type Traj = trajectory::Trajectory<f64>;
pub type Trainer = selfplay::SelfPlayTrainer<f64>;
pub type Baseline = curriculum::BaselineTrainer<f64>;
