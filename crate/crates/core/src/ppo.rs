//! PPO with GAE, a clipped surrogate, entropy bonus, separate value loss and
//! Adam, plus the optional behavioral-cloning term used for Bob.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abc::{abc_sample, AbcParams, DemoStep};
use crate::env::{Action, Observation};
use crate::nn::{MultiCategorical, NetError, OutputGrad, ParamVector};
use crate::scalar::Scalar;
use crate::trajectory::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss in minibatch {minibatch} of epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, minibatch: usize, detail: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoHyperParams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_loss_weight: f64,
    pub learning_rate: f64,
    /// Optimization epochs over each collected batch.
    pub sample_reuse: usize,
    pub minibatch_size: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoHyperParams {
    fn default() -> Self {
        PpoHyperParams {
            gamma: 0.998,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            value_loss_weight: 1.0,
            learning_rate: 3e-4,
            sample_reuse: 3,
            minibatch_size: 256,
            normalize_advantages: true,
        }
    }
}

impl PpoHyperParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("ppo.gamma = {} not in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("ppo.gae_lambda = {} not in [0, 1]", self.gae_lambda));
        }
        if !(self.clip_eps > 0.0) {
            return Err("ppo.clip_eps must be > 0".into());
        }
        if self.sample_reuse < 1 || self.minibatch_size < 1 {
            return Err("ppo.sample_reuse and ppo.minibatch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("ppo.learning_rate must be > 0".into());
        }
        Ok(())
    }
}

/// Advantages and returns by the backward GAE recursion.
///
/// `dones[t]` marks the last step of an episode: nothing is bootstrapped across it.
/// `bootstrap` is the value estimate after the final step (0 at a true episode end).
pub fn compute_gae<T: Scalar>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    bootstrap: T,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<T>, Vec<T>), PpoError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PpoError::Length(format!("rewards {n}, values {}, dones {}", values.len(), dones.len())));
    }
    let (g, gl) = (T::of(gamma), T::of(gamma * lambda));
    let mut adv = vec![T::zero(); n];
    let mut next_value = bootstrap;
    let mut next_adv = T::zero();
    for t in (0..n).rev() {
        let live = if dones[t] { T::zero() } else { T::one() };
        let delta = rewards[t] + g * live * next_value - values[t];
        next_adv = delta + gl * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| *a + *v).collect();
    Ok((adv, returns))
}

/// Mean clipped-surrogate loss `-min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn ppo_policy_loss<T: Scalar>(new_log_probs: &[T], old_log_probs: &[T], advantages: &[T], clip_eps: f64) -> T {
    let n = new_log_probs.len();
    let total: T = (0..n).map(|i| surrogate(new_log_probs[i], old_log_probs[i], advantages[i], clip_eps).0).sum();
    total / T::of(n as f64)
}

/// Per-sample surrogate loss and its derivative in the new log-probability.
fn surrogate<T: Scalar>(new_lp: T, old_lp: T, adv: T, clip_eps: f64) -> (T, T) {
    let r = (new_lp - old_lp).exp();
    let clipped = r.max(T::of(1.0 - clip_eps)).min(T::of(1.0 + clip_eps));
    let (unclipped_term, clipped_term) = (r * adv, clipped * adv);
    if unclipped_term <= clipped_term {
        (-unclipped_term, -adv * r)
    } else {
        (-clipped_term, T::zero())
    }
}

/// Mean squared error; weighted by `value_loss_weight` where it is combined.
pub fn value_loss<T: Scalar>(new_values: &[T], returns: &[T]) -> T {
    let n = new_values.len();
    let total: T = new_values.iter().zip(returns).map(|(v, r)| (*v - *r) * (*v - *r)).sum();
    total / T::of(n as f64)
}

/// On-policy training data for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch<T> {
    pub observations: Vec<Observation<T>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<T>,
    pub old_log_probs: Vec<T>,
    pub old_values: Vec<T>,
    pub dones: Vec<bool>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
}

impl<T: Scalar> Default for TransitionBatch<T> {
    fn default() -> Self {
        TransitionBatch {
            observations: vec![],
            actions: vec![],
            rewards: vec![],
            old_log_probs: vec![],
            old_values: vec![],
            dones: vec![],
            advantages: vec![],
            returns: vec![],
        }
    }
}

impl<T: Scalar> TransitionBatch<T> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Flattens terminal-ended trajectories and fills in GAE advantages and returns.
    pub fn from_trajectories<'a, I>(trajectories: I, gamma: f64, lambda: f64) -> Self
    where
        I: IntoIterator<Item = &'a Trajectory<T>>,
    {
        let mut b = TransitionBatch::default();
        for traj in trajectories {
            if traj.is_empty() {
                continue;
            }
            let rewards: Vec<T> = traj.steps.iter().map(|s| T::of(s.reward)).collect();
            let values: Vec<T> = traj.steps.iter().map(|s| s.value).collect();
            let mut dones = vec![false; traj.len()];
            *dones.last_mut().unwrap() = true;
            let (adv, ret) =
                compute_gae(&rewards, &values, &dones, T::zero(), gamma, lambda).expect("aligned by construction");
            for s in &traj.steps {
                b.observations.push(s.obs.clone());
                b.actions.push(s.action);
                b.old_log_probs.push(s.log_prob);
                b.old_values.push(s.value);
            }
            b.rewards.extend(rewards);
            b.dones.extend(dones);
            b.advantages.extend(adv);
            b.returns.extend(ret);
        }
        b
    }

    pub fn check(&self) -> Result<(), PpoError> {
        let n = self.len();
        let lens = [
            self.observations.len(),
            self.rewards.len(),
            self.old_log_probs.len(),
            self.old_values.len(),
            self.dones.len(),
            self.advantages.len(),
            self.returns.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(PpoError::Length(format!("batch columns {lens:?} vs {n} actions")));
        }
        Ok(())
    }

    pub fn extend(&mut self, other: TransitionBatch<T>) {
        self.observations.extend(other.observations);
        self.actions.extend(other.actions);
        self.rewards.extend(other.rewards);
        self.old_log_probs.extend(other.old_log_probs);
        self.old_values.extend(other.old_values);
        self.dones.extend(other.dones);
        self.advantages.extend(other.advantages);
        self.returns.extend(other.returns);
    }
}

/// Zero mean, unit variance (no-op for fewer than two samples).
pub fn normalize<T: Scalar>(xs: &mut [T]) {
    if xs.len() < 2 {
        return;
    }
    let n = T::of(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>() / n;
    let std = var.sqrt() + T::of(1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) / std;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn apply(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Demonstrations to imitate alongside the RL objective.
#[derive(Debug, Clone, Copy)]
pub struct BcTerm<'a, T> {
    pub demos: &'a [DemoStep<T>],
    pub params: &'a AbcParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizeStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub abc_loss: f64,
    pub total_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
    pub samples_processed: usize,
    pub bc_samples_processed: usize,
}

/// Shuffled minibatches over `sample_reuse` epochs; each index appears once per epoch.
pub fn minibatch_schedule<R: Rng + ?Sized>(
    n: usize,
    minibatch_size: usize,
    epochs: usize,
    rng: &mut R,
) -> Vec<Vec<Vec<usize>>> {
    (0..epochs)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(minibatch_size.max(1)).map(|c| c.to_vec()).collect()
        })
        .collect()
}

/// Splits a shuffled permutation of `0..n` into `parts` near-equal chunks.
fn split_even<R: Rng + ?Sized>(n: usize, parts: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    (0..parts).map(|p| idx[p * n / parts..(p + 1) * n / parts].to_vec()).collect()
}

/// Loss terms of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinibatchLoss<T> {
    /// `policy + value_loss_weight·value − entropy_coef·entropy + β·abc`.
    pub total: T,
    pub policy: T,
    pub value: T,
    pub entropy: T,
    pub abc: T,
    pub approx_kl: T,
    /// Samples whose ratio left `[1 − ε, 1 + ε]`.
    pub clipped: usize,
}

/// Loss of the minibatch `idx` of `batch` (with `advantages` already normalized as
/// desired) plus demonstrations `bc_idx`, and its exact gradient.
pub fn minibatch_loss_and_grad<T: Scalar>(
    params: &ParamVector<T>,
    batch: &TransitionBatch<T>,
    advantages: &[T],
    idx: &[usize],
    bc: Option<(BcTerm<'_, T>, &[usize])>,
    hp: &PpoHyperParams,
) -> Result<(MinibatchLoss<T>, Vec<T>), PpoError> {
    let n_logits = params.spec.n_logits();
    let ent = T::of(hp.entropy_coef);
    let vw = T::of(hp.value_loss_weight);
    let m = T::of(idx.len().max(1) as f64);
    let mut grad = vec![T::zero(); params.len()];
    let (mut pl, mut vl, mut en, mut kl) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut clipped = 0;
    for &i in idx {
        let (out, cache) = params.forward_cached(&batch.observations[i])?;
        let dist = MultiCategorical::new(&out);
        let lp = dist.log_prob(&batch.actions[i])?;
        let (loss, dlp) = surrogate(lp, batch.old_log_probs[i], advantages[i], hp.clip_eps);
        let ratio = (lp - batch.old_log_probs[i]).exp();
        if (ratio - T::one()).abs() > T::of(hp.clip_eps) {
            clipped += 1;
        }
        let h = dist.entropy();
        let dv = out.value - batch.returns[i];
        pl = pl + loss;
        vl = vl + dv * dv;
        en = en + h;
        kl = kl + (batch.old_log_probs[i] - lp);
        let lpg = dist.log_prob_grad(&batch.actions[i]);
        let hg = dist.entropy_grad();
        let mut dout = OutputGrad::zeros(n_logits);
        for j in 0..n_logits {
            dout.dlogits[j] = (dlp * lpg[j] - ent * hg[j]) / m;
        }
        dout.dvalue = vw * T::of(2.0) * dv / m;
        params.accumulate_gradient(&cache, &dout, &mut grad)?;
    }
    let mut abc_mean = T::zero();
    let mut beta = T::zero();
    if let Some((b, chunk)) = bc {
        if !chunk.is_empty() {
            let c = T::of(chunk.len() as f64);
            beta = T::of(b.params.beta);
            for &j in chunk {
                let d = &b.demos[j];
                let (out, cache) = params.forward_cached(&d.obs)?;
                let dist = MultiCategorical::new(&out);
                let lp = dist.log_prob(&d.action)?;
                let (loss, dlp) = abc_sample(lp, d.bob_old_log_prob, b.params);
                abc_mean = abc_mean + loss / c;
                if dlp != T::zero() {
                    let lpg = dist.log_prob_grad(&d.action);
                    let mut dout = OutputGrad::zeros(n_logits);
                    for (o, g) in dout.dlogits.iter_mut().zip(&lpg) {
                        *o = beta * dlp * *g / c;
                    }
                    params.accumulate_gradient(&cache, &dout, &mut grad)?;
                }
            }
        }
    }
    let loss = MinibatchLoss {
        total: pl / m + vw * vl / m - ent * en / m + beta * abc_mean,
        policy: pl / m,
        value: vl / m,
        entropy: en / m,
        abc: abc_mean,
        approx_kl: kl / m,
        clipped,
    };
    Ok((loss, grad))
}

/// Runs PPO epochs on `batch` (plus `bc` demonstrations when given) and returns the
/// updated parameters. On a non-finite loss the update is abandoned and `params`
/// are left untouched by the caller.
pub fn optimize<T: Scalar, R: Rng + ?Sized>(
    params: &ParamVector<T>,
    batch: &TransitionBatch<T>,
    bc: Option<BcTerm<'_, T>>,
    hp: &PpoHyperParams,
    adam: &mut AdamState<T>,
    rng: &mut R,
) -> Result<(ParamVector<T>, OptimizeStats), PpoError> {
    batch.check()?;
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let mut advantages = batch.advantages.clone();
    if hp.normalize_advantages {
        normalize(&mut advantages);
    }
    let mut new_params = params.clone();
    let mut adam_work = adam.clone();
    let mut stats = OptimizeStats::default();
    let bc = bc.filter(|b| !b.demos.is_empty() && b.params.enabled && b.params.beta > 0.0);
    let mut clipped = 0usize;

    let schedule = minibatch_schedule(batch.len(), hp.minibatch_size, hp.sample_reuse, rng);
    for (epoch, minibatches) in schedule.iter().enumerate() {
        let bc_chunks = bc.map(|b| split_even(b.demos.len(), minibatches.len(), rng));
        for (k, mb) in minibatches.iter().enumerate() {
            let bc_k = match (bc, &bc_chunks) {
                (Some(b), Some(chunks)) => Some((b, chunks[k].as_slice())),
                _ => None,
            };
            let (loss, grad) = minibatch_loss_and_grad(&new_params, batch, &advantages, mb, bc_k, hp)?;
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PpoError::NonFinite {
                    epoch,
                    minibatch: k,
                    detail: format!(
                        "policy {:?} value {:?} entropy {:?} abc {:?}",
                        loss.policy, loss.value, loss.entropy, loss.abc
                    ),
                });
            }
            adam_work.apply(&mut new_params.values, &grad, hp.learning_rate);
            clipped += loss.clipped;
            stats.policy_loss += loss.policy.as_f64();
            stats.value_loss += loss.value.as_f64();
            stats.entropy += loss.entropy.as_f64();
            stats.abc_loss += loss.abc.as_f64();
            stats.total_loss += loss.total.as_f64();
            stats.approx_kl += loss.approx_kl.as_f64();
            stats.minibatches += 1;
            stats.samples_processed += mb.len();
            stats.bc_samples_processed += bc_k.map_or(0, |(_, c)| c.len());
        }
    }
    let nmb = stats.minibatches.max(1) as f64;
    stats.policy_loss /= nmb;
    stats.value_loss /= nmb;
    stats.entropy /= nmb;
    stats.abc_loss /= nmb;
    stats.total_loss /= nmb;
    stats.approx_kl /= nmb;
    stats.clip_fraction = clipped as f64 / stats.samples_processed.max(1) as f64;
    *adam = adam_work;
    Ok((new_params, stats))
}
