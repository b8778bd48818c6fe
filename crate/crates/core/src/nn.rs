//! Goal-conditioned policy and value networks.
//!
//! Each network is a permutation-invariant set encoder: every object row goes
//! through a shared tanh MLP, the per-object embeddings are max-pooled over the
//! object dimension, the pooled vector is concatenated with the gripper
//! features and fed through a tanh trunk. The policy head emits one logit
//! vector per action factor; the value network has its own encoder and trunk
//! (unless `separate_value_net` is off, in which case a value head sits on the
//! policy trunk).
//!
//! Gradients are computed by an explicit reverse pass over the cached forward
//! activations. Callers describe the loss by its gradient with respect to the
//! network outputs ([`OutputGrad`]) and get back the gradient with respect to
//! every parameter.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Observation, ACTION_FACTOR_SIZES, GRIPPER_FEATURES, OBJECT_FEATURES};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("parameter vector has length {got}, architecture needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("observation has no objects")]
    EmptyObservation,
    #[error("action index {index} out of range for factor {factor} (size {size})")]
    ActionIndex { factor: usize, index: usize, size: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub object_embed_widths: Vec<usize>,
    pub trunk_widths: Vec<usize>,
    pub action_factor_sizes: Vec<usize>,
    pub separate_value_net: bool,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec {
            object_embed_widths: vec![64, 64],
            trunk_widths: vec![128, 64],
            action_factor_sizes: ACTION_FACTOR_SIZES.to_vec(),
            separate_value_net: true,
        }
    }
}

impl ArchitectureSpec {
    pub fn small(embed: usize, trunk: usize) -> Self {
        ArchitectureSpec {
            object_embed_widths: vec![embed, embed],
            trunk_widths: vec![trunk, trunk],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.object_embed_widths.is_empty() || self.trunk_widths.is_empty() {
            return Err(NetError::Spec("embedding and trunk need at least one layer".into()));
        }
        if self.object_embed_widths.iter().chain(&self.trunk_widths).any(|&w| w == 0) {
            return Err(NetError::Spec("layer widths must be >= 1".into()));
        }
        if self.action_factor_sizes != ACTION_FACTOR_SIZES {
            return Err(NetError::Spec(format!(
                "action factor sizes {:?} do not match the action space {:?}",
                self.action_factor_sizes, ACTION_FACTOR_SIZES
            )));
        }
        Ok(())
    }

    pub fn n_logits(&self) -> usize {
        self.action_factor_sizes.iter().sum()
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    offset: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn size(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn bias(&self) -> usize {
        self.offset + self.n_in * self.n_out
    }

    fn forward<T: Scalar>(&self, p: &[T], x: &[T], out: &mut Vec<T>) {
        out.clear();
        let w = &p[self.offset..self.offset + self.n_in * self.n_out];
        let b = &p[self.bias()..self.bias() + self.n_out];
        for o in 0..self.n_out {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc = acc + *wi * *xi;
            }
            out.push(acc);
        }
    }

    /// Accumulates weight/bias gradients for upstream gradient `dz`, returns `dL/dx`.
    fn backward<T: Scalar>(&self, p: &[T], x: &[T], dz: &[T], grad: &mut [T], want_dx: bool) -> Vec<T> {
        let mut dx = if want_dx { vec![T::zero(); self.n_in] } else { Vec::new() };
        for o in 0..self.n_out {
            let d = dz[o];
            if d == T::zero() {
                continue;
            }
            let base = self.offset + o * self.n_in;
            for i in 0..self.n_in {
                grad[base + i] = grad[base + i] + d * x[i];
            }
            grad[self.bias() + o] = grad[self.bias() + o] + d;
            if want_dx {
                let row = &p[base..base + self.n_in];
                for i in 0..self.n_in {
                    dx[i] = dx[i] + row[i] * d;
                }
            }
        }
        dx
    }
}

/// Encoder + trunk: observation → trunk features.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Tower {
    embed: Vec<Dense>,
    trunk: Vec<Dense>,
}

impl Tower {
    fn new(spec: &ArchitectureSpec, offset: &mut usize) -> Self {
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense { offset: *offset, n_in, n_out };
            *offset += d.size();
            d
        };
        let mut embed = Vec::new();
        let mut n_in = OBJECT_FEATURES;
        for &w in &spec.object_embed_widths {
            embed.push(dense(n_in, w));
            n_in = w;
        }
        let mut trunk = Vec::new();
        n_in += GRIPPER_FEATURES;
        for &w in &spec.trunk_widths {
            trunk.push(dense(n_in, w));
            n_in = w;
        }
        Tower { embed, trunk }
    }

    fn out_width(&self) -> usize {
        self.trunk.last().map(|d| d.n_out).unwrap_or(0)
    }

    fn embed_width(&self) -> usize {
        self.embed.last().map(|d| d.n_out).unwrap_or(0)
    }

    fn range(&self) -> std::ops::Range<usize> {
        let start = self.embed[0].offset;
        let last = self.trunk.last().unwrap();
        start..last.offset + last.size()
    }

    fn forward<T: Scalar>(&self, p: &[T], obs: &Observation<T>) -> TowerCache<T> {
        let n = obs.n_objects();
        let mut objects = Vec::with_capacity(n);
        let mut buf = Vec::new();
        for k in 0..n {
            let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.embed.len() + 1);
            acts.push(obs.object(k).to_vec());
            for layer in &self.embed {
                layer.forward(p, acts.last().unwrap(), &mut buf);
                acts.push(buf.iter().map(|z| z.tanh()).collect());
            }
            objects.push(acts);
        }
        let width = self.embed_width();
        let mut pooled = Vec::with_capacity(width + GRIPPER_FEATURES);
        let mut argmax = Vec::with_capacity(width);
        for d in 0..width {
            let (mut best_k, mut best) = (0, objects[0].last().unwrap()[d]);
            for (k, acts) in objects.iter().enumerate().skip(1) {
                let v = acts.last().unwrap()[d];
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            pooled.push(best);
            argmax.push(best_k);
        }
        pooled.extend_from_slice(&obs.gripper);
        let mut trunk: Vec<Vec<T>> = Vec::with_capacity(self.trunk.len() + 1);
        trunk.push(pooled);
        for layer in &self.trunk {
            layer.forward(p, trunk.last().unwrap(), &mut buf);
            trunk.push(buf.iter().map(|z| z.tanh()).collect());
        }
        TowerCache { objects, argmax, trunk }
    }

    fn backward<T: Scalar>(&self, p: &[T], cache: &TowerCache<T>, dout: &[T], grad: &mut [T]) {
        // trunk, top down
        let mut da = dout.to_vec();
        for (l, layer) in self.trunk.iter().enumerate().rev() {
            let a = &cache.trunk[l + 1];
            let dz: Vec<T> = da.iter().zip(a).map(|(g, a)| *g * (T::one() - *a * *a)).collect();
            da = layer.backward(p, &cache.trunk[l], &dz, grad, true);
        }
        // route pooled gradient to the arg-max object per dimension
        let width = self.embed_width();
        let n = cache.objects.len();
        let mut per_object = vec![vec![T::zero(); width]; n];
        let mut touched = vec![false; n];
        for d in 0..width {
            let k = cache.argmax[d];
            if da[d] != T::zero() {
                per_object[k][d] = per_object[k][d] + da[d];
                touched[k] = true;
            }
        }
        for k in 0..n {
            if !touched[k] {
                continue;
            }
            let acts = &cache.objects[k];
            let mut da = std::mem::take(&mut per_object[k]);
            for (l, layer) in self.embed.iter().enumerate().rev() {
                let a = &acts[l + 1];
                let dz: Vec<T> = da.iter().zip(a).map(|(g, a)| *g * (T::one() - *a * *a)).collect();
                da = layer.backward(p, &acts[l], &dz, grad, l > 0);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct TowerCache<T> {
    /// Per object: input row followed by each embedding layer's activation.
    objects: Vec<Vec<Vec<T>>>,
    argmax: Vec<usize>,
    /// Trunk input (pooled ++ gripper) followed by each trunk activation.
    trunk: Vec<Vec<T>>,
}

impl<T: Scalar> TowerCache<T> {
    fn output(&self) -> &[T] {
        self.trunk.last().unwrap()
    }

    /// The max-pooled object embedding.
    fn pooled(&self, width: usize) -> &[T] {
        &self.trunk[0][..width]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    policy: Tower,
    logits: Dense,
    value_tower: Option<Tower>,
    value_head: Dense,
    total: usize,
}

impl Layout {
    fn new(spec: &ArchitectureSpec) -> Self {
        let mut offset = 0;
        let policy = Tower::new(spec, &mut offset);
        let logits = Dense { offset, n_in: policy.out_width(), n_out: spec.n_logits() };
        offset += logits.size();
        let value_tower = spec.separate_value_net.then(|| Tower::new(spec, &mut offset));
        let n_in = value_tower.as_ref().unwrap_or(&policy).out_width();
        let value_head = Dense { offset, n_in, n_out: 1 };
        offset += value_head.size();
        Layout { policy, logits, value_tower, value_head, total: offset }
    }
}

/// Flat parameters of one agent's policy and value networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    pub spec: ArchitectureSpec,
    /// Training step at which this snapshot was taken.
    pub version: u64,
    layout: Layout,
}

/// Raw network outputs for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput<T> {
    pub factor_logits: Vec<Vec<T>>,
    pub value: T,
}

/// Forward activations retained for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    policy: TowerCache<T>,
    value: Option<TowerCache<T>>,
}

impl<T> ForwardCache<T> {
    #[cfg(test)]
    fn pooled_policy_embedding(&self) -> &[T] {
        &self.policy.trunk[0]
    }
}

/// Loss gradient with respect to the network outputs of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad<T> {
    /// Concatenated over factors, same order as the logits.
    pub dlogits: Vec<T>,
    pub dvalue: T,
}

impl<T: Scalar> OutputGrad<T> {
    pub fn zeros(n_logits: usize) -> Self {
        OutputGrad { dlogits: vec![T::zero(); n_logits], dvalue: T::zero() }
    }
}

/// Draws initial parameters: uniform in ±sqrt(3 / fan_in) for every weight matrix
/// (scaled by 0.01 on the policy head), zero biases.
pub fn init_params<T: Scalar>(spec: &ArchitectureSpec, seed: u64) -> Result<ParamVector<T>, NetError> {
    spec.validate()?;
    let layout = Layout::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![T::zero(); layout.total];
    let mut fill = |d: &Dense, scale: f64, rng: &mut ChaCha8Rng| {
        let limit = (3.0 / d.n_in as f64).sqrt() * scale;
        let dist = Uniform::new_inclusive(-limit, limit);
        for v in &mut values[d.offset..d.offset + d.n_in * d.n_out] {
            *v = T::of(dist.sample(rng));
        }
    };
    for tower in std::iter::once(&layout.policy).chain(layout.value_tower.as_ref()) {
        for d in tower.embed.iter().chain(&tower.trunk) {
            fill(d, 1.0, &mut rng);
        }
    }
    fill(&layout.logits, 0.01, &mut rng);
    fill(&layout.value_head, 1.0, &mut rng);
    Ok(ParamVector { values, spec: spec.clone(), version: 0, layout })
}

impl<T: Scalar> ParamVector<T> {
    /// Wraps raw values, checking the length against the architecture.
    pub fn from_values(spec: ArchitectureSpec, values: Vec<T>, version: u64) -> Result<Self, NetError> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if values.len() != layout.total {
            return Err(NetError::ParamLength { expected: layout.total, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("parameters".into()));
        }
        Ok(ParamVector { values, spec, version, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Parameter coordinates read only by the value network.
    pub fn value_range(&self) -> std::ops::Range<usize> {
        match &self.layout.value_tower {
            Some(t) => t.range().start..self.layout.total,
            None => self.layout.value_head.offset..self.layout.total,
        }
    }

    /// Parameter coordinates of the policy encoder and trunk.
    pub fn policy_trunk_range(&self) -> std::ops::Range<usize> {
        self.layout.policy.range()
    }

    /// Output layer of the policy (the logit head).
    pub fn policy_head_range(&self) -> std::ops::Range<usize> {
        self.layout.logits.offset..self.layout.logits.offset + self.layout.logits.size()
    }

    pub fn value_head_range(&self) -> std::ops::Range<usize> {
        self.layout.value_head.offset..self.layout.value_head.offset + self.layout.value_head.size()
    }

    pub fn forward(&self, obs: &Observation<T>) -> Result<PolicyOutput<T>, NetError> {
        self.forward_cached(obs).map(|(out, _)| out)
    }

    pub fn forward_cached(&self, obs: &Observation<T>) -> Result<(PolicyOutput<T>, ForwardCache<T>), NetError> {
        if obs.n_objects() == 0 || !obs.objects.len().is_multiple_of(OBJECT_FEATURES) {
            return Err(NetError::EmptyObservation);
        }
        let p = &self.values;
        let policy = self.layout.policy.forward(p, obs);
        let mut flat = Vec::new();
        self.layout.logits.forward(p, policy.output(), &mut flat);
        let value = self.layout.value_tower.as_ref().map(|t| t.forward(p, obs));
        let mut v = Vec::new();
        self.layout.value_head.forward(p, value.as_ref().unwrap_or(&policy).output(), &mut v);
        let mut factor_logits = Vec::with_capacity(self.spec.action_factor_sizes.len());
        let mut start = 0;
        for &n in &self.spec.action_factor_sizes {
            factor_logits.push(flat[start..start + n].to_vec());
            start += n;
        }
        Ok((PolicyOutput { factor_logits, value: v[0] }, ForwardCache { policy, value }))
    }

    /// Accumulates the parameter gradient of one sample into `grad`.
    pub fn accumulate_gradient(
        &self,
        cache: &ForwardCache<T>,
        dout: &OutputGrad<T>,
        grad: &mut [T],
    ) -> Result<(), NetError> {
        if dout.dlogits.iter().any(|g| !g.is_finite()) || !dout.dvalue.is_finite() {
            return Err(NetError::NonFinite("output gradient".into()));
        }
        let p = &self.values;
        let l = &self.layout;
        let mut dtrunk = l.logits.backward(p, cache.policy.output(), &dout.dlogits, grad, true);
        match (&l.value_tower, &cache.value) {
            (Some(tower), Some(vc)) => {
                let dv = l.value_head.backward(p, vc.output(), &[dout.dvalue], grad, true);
                tower.backward(p, vc, &dv, grad);
            }
            _ => {
                let dv = l.value_head.backward(p, cache.policy.output(), &[dout.dvalue], grad, true);
                for (a, b) in dtrunk.iter_mut().zip(dv) {
                    *a = *a + b;
                }
            }
        }
        l.policy.backward(p, &cache.policy, &dtrunk, grad);
        Ok(())
    }

    /// Gradient of `Σ_i ⟨dout_i, outputs(obs_i)⟩` with respect to all parameters.
    pub fn backward(&self, batch: &[(Observation<T>, OutputGrad<T>)]) -> Result<Vec<T>, NetError> {
        if batch.is_empty() {
            return Err(NetError::EmptyBatch);
        }
        let mut grad = vec![T::zero(); self.len()];
        for (obs, dout) in batch {
            let (_, cache) = self.forward_cached(obs)?;
            self.accumulate_gradient(&cache, dout, &mut grad)?;
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFinite(format!("gradient coordinate {i}")));
        }
        Ok(grad)
    }

    /// Max-pooled object embedding of the policy encoder.
    pub fn pooled_embedding(&self, obs: &Observation<T>) -> Result<Vec<T>, NetError> {
        let (_, cache) = self.forward_cached(obs)?;
        Ok(cache.policy.pooled(self.layout.policy.embed_width()).to_vec())
    }
}

/// Normalized per-factor distribution derived from a [`PolicyOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCategorical<T> {
    pub log_probs: Vec<Vec<T>>,
}

impl<T: Scalar> MultiCategorical<T> {
    pub fn new(output: &PolicyOutput<T>) -> Self {
        let log_probs = output
            .factor_logits
            .iter()
            .map(|l| {
                let m = l.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + l.iter().map(|x| (*x - m).exp()).sum::<T>().ln();
                l.iter().map(|x| *x - lse).collect()
            })
            .collect();
        MultiCategorical { log_probs }
    }

    pub fn probs(&self, factor: usize) -> Vec<T> {
        self.log_probs[factor].iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, action: &Action) -> Result<T, NetError> {
        let idx = action.indices();
        let mut lp = T::zero();
        for (f, &i) in idx.iter().enumerate() {
            let size = self.log_probs[f].len();
            let v = self.log_probs[f].get(i).ok_or(NetError::ActionIndex { factor: f, index: i, size })?;
            lp = lp + *v;
        }
        Ok(lp)
    }

    pub fn entropy(&self) -> T {
        self.log_probs.iter().map(|lps| lps.iter().map(|l| -(l.exp() * *l)).sum::<T>()).sum()
    }

    /// `d log π(a) / d logits`, concatenated over factors.
    pub fn log_prob_grad(&self, action: &Action) -> Vec<T> {
        let idx = action.indices();
        let mut g = Vec::new();
        for (f, lps) in self.log_probs.iter().enumerate() {
            for (k, l) in lps.iter().enumerate() {
                let onehot = if k == idx[f] { T::one() } else { T::zero() };
                g.push(onehot - l.exp());
            }
        }
        g
    }

    /// `d H / d logits`, concatenated over factors.
    pub fn entropy_grad(&self) -> Vec<T> {
        let mut g = Vec::new();
        for lps in &self.log_probs {
            let h: T = lps.iter().map(|l| -(l.exp() * *l)).sum();
            for l in lps {
                g.push(-(l.exp()) * (*l + h));
            }
        }
        g
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Action, T) {
        let mut idx = [0usize; 3];
        let mut lp = T::zero();
        for (f, lps) in self.log_probs.iter().enumerate() {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = lps.len() - 1;
            for (k, l) in lps.iter().enumerate() {
                acc += l.exp().as_f64();
                if u < acc {
                    pick = k;
                    break;
                }
            }
            idx[f] = pick;
            lp = lp + lps[pick];
        }
        (Action::from_indices(idx).expect("factor sizes match the action space"), lp)
    }

    /// Most likely action.
    pub fn mode(&self) -> Action {
        let mut idx = [0usize; 3];
        for (f, lps) in self.log_probs.iter().enumerate() {
            let mut best = 0;
            for k in 1..lps.len() {
                if lps[k] > lps[best] {
                    best = k;
                }
            }
            idx[f] = best;
        }
        Action::from_indices(idx).expect("factor sizes match the action space")
    }
}

/// Samples each factor independently; the log-probability is the sum over factors.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(output: &PolicyOutput<T>, rng: &mut R) -> (Action, T) {
    MultiCategorical::new(output).sample(rng)
}

pub fn log_prob_and_entropy<T: Scalar>(output: &PolicyOutput<T>, action: &Action) -> Result<(T, T), NetError> {
    let d = MultiCategorical::new(output);
    Ok((d.log_prob(action)?, d.entropy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{observe, GridConfig, GripperState, ObjectState, Orientation, WorldState};
    use crate::goal::{Goal, MatchTolerance};

    fn obs(n: usize) -> Observation<f64> {
        let objects = (0..n)
            .map(|i| ObjectState { x: i, y: (2 * i) % 5, level: 0, orientation: Orientation::from_quarters(i as i64) })
            .collect();
        let s = WorldState { gripper: GripperState { x: 1, y: 3, z: 1, holding: None }, objects, step_count: 0 };
        let mut g = Goal::from_state(&s);
        g.targets[0].x = 4;
        observe(&GridConfig::square(5), &s, Some(&g), &MatchTolerance::default()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ArchitectureSpec::small(8, 8);
        let a = init_params::<f64>(&spec, 3).unwrap();
        let b = init_params::<f64>(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f64>(&spec, 4).unwrap());
    }

    #[test]
    fn param_count_matches_hand_count() {
        let spec = ArchitectureSpec::default();
        let dense = |i: usize, o: usize| i * o + o;
        let tower = dense(OBJECT_FEATURES, 64) + dense(64, 64) + dense(64 + GRIPPER_FEATURES, 128) + dense(128, 64);
        let expected = tower + dense(64, 12) + tower + dense(64, 1);
        assert_eq!(spec.param_count(), expected);
        let shared = ArchitectureSpec { separate_value_net: false, ..spec };
        assert_eq!(shared.param_count(), tower + dense(64, 12) + dense(64, 1));
    }

    #[test]
    fn zero_head_gives_uniform_factors() {
        let spec = ArchitectureSpec::small(8, 8);
        let mut p = init_params::<f64>(&spec, 1).unwrap();
        let head = p.policy_head_range();
        p.values[head].iter_mut().for_each(|v| *v = 0.0);
        let zero = Observation { gripper: [0.0; 4], objects: vec![0.0; OBJECT_FEATURES] };
        let out = p.forward(&zero).unwrap();
        let d = MultiCategorical::new(&out);
        for (f, n) in [5usize, 4, 3].into_iter().enumerate() {
            for q in d.probs(f) {
                assert!((q - 1.0 / n as f64).abs() < 1e-15);
            }
        }
        let (lp, h) = log_prob_and_entropy(&out, &Action::NOOP).unwrap();
        assert!((lp + 60f64.ln()).abs() < 1e-12);
        assert!((h - 60f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pooling_single_and_duplicate_objects() {
        let spec = ArchitectureSpec::small(8, 8);
        let p = init_params::<f64>(&spec, 5).unwrap();
        let one = obs(1);
        let (_, cache) = p.forward_cached(&one).unwrap();
        // with one object the pooled vector is exactly that object's embedding
        let emb = cache.policy.objects[0].last().unwrap().clone();
        assert_eq!(&cache.pooled_policy_embedding()[..8], &emb[..]);
        let mut dup = one.clone();
        dup.objects.extend_from_slice(&one.objects);
        assert_eq!(p.pooled_embedding(&dup).unwrap(), p.pooled_embedding(&one).unwrap());
        assert_eq!(p.forward(&dup).unwrap(), p.forward(&one).unwrap());
    }

    #[test]
    fn object_order_does_not_matter() {
        let spec = ArchitectureSpec::small(8, 8);
        let p = init_params::<f64>(&spec, 5).unwrap();
        let o = obs(3);
        let base = p.forward(&o).unwrap();
        for perm in [[0, 2, 1], [1, 0, 2], [2, 1, 0], [1, 2, 0], [2, 0, 1]] {
            assert_eq!(p.forward(&o.permute_objects(&perm)).unwrap(), base);
        }
    }

    #[test]
    fn deterministic_factor_and_entropy() {
        let out = PolicyOutput {
            factor_logits: vec![vec![1000.0, 0.0, 0.0, 0.0, 0.0], vec![0.0; 4], vec![0.0; 3]],
            value: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (a, _) = sample_action(&out, &mut rng);
            assert_eq!(a.indices()[0], 0);
        }
        let (_, h) = log_prob_and_entropy(&out, &Action::NOOP).unwrap();
        assert!((h - (4f64.ln() + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn action_probabilities_sum_to_one() {
        let spec = ArchitectureSpec::small(8, 8);
        let p = init_params::<f64>(&spec, 9).unwrap();
        let mut p2 = p.clone();
        p2.values.iter_mut().for_each(|v| *v *= 40.0);
        for params in [p, p2] {
            let out = params.forward(&obs(2)).unwrap();
            let total: f64 = Action::all().map(|a| log_prob_and_entropy(&out, &a).unwrap().0.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_output_gradient_is_zero() {
        let spec = ArchitectureSpec::small(8, 8);
        let p = init_params::<f64>(&spec, 2).unwrap();
        let g = p.backward(&[(obs(2), OutputGrad::zeros(12))]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert_eq!(p.backward(&[]), Err(NetError::EmptyBatch));
    }

    #[test]
    fn value_gradient_stays_in_value_net() {
        let spec = ArchitectureSpec::small(8, 8);
        let p = init_params::<f64>(&spec, 2).unwrap();
        let dout = OutputGrad { dlogits: vec![0.0; 12], dvalue: 1.3 };
        let g = p.backward(&[(obs(2), dout)]).unwrap();
        let vr = p.value_range();
        assert!(g.iter().enumerate().all(|(i, v)| vr.contains(&i) || *v == 0.0));
        assert!(g[vr].iter().any(|v| *v != 0.0));
        let dout = OutputGrad { dlogits: vec![0.5; 12], dvalue: 0.0 };
        let g = p.backward(&[(obs(2), dout)]).unwrap();
        assert!(g[p.value_range()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_action_index_and_nonfinite_grad() {
        let d = MultiCategorical { log_probs: vec![vec![0.0; 2], vec![0.0; 4], vec![0.0; 3]] };
        let a = Action::from_flat(59).unwrap();
        assert!(matches!(d.log_prob(&a), Err(NetError::ActionIndex { factor: 0, .. })));
        let spec = ArchitectureSpec::small(4, 4);
        let p = init_params::<f64>(&spec, 2).unwrap();
        let dout = OutputGrad { dlogits: vec![f64::NAN; 12], dvalue: 0.0 };
        assert!(matches!(p.backward(&[(obs(1), dout)]), Err(NetError::NonFinite(_))));
    }

    #[test]
    fn works_in_single_precision() {
        let spec = ArchitectureSpec::small(8, 8);
        let p = init_params::<f32>(&spec, 5).unwrap();
        let s = WorldState {
            gripper: GripperState { x: 0, y: 0, z: 0, holding: None },
            objects: vec![ObjectState { x: 2, y: 2, level: 0, orientation: Orientation::default() }],
            step_count: 0,
        };
        let o: Observation<f32> = observe(&GridConfig::square(5), &s, None, &MatchTolerance::default()).unwrap();
        let out = p.forward(&o).unwrap();
        assert!(out.value.is_finite());
        let total: f32 = MultiCategorical::new(&out).probs(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
