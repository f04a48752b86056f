//! PPO with an optional expert cross-entropy term.
//!
//! The policy and value function are separate networks. One gradient step
//! minimizes
//!
//! ```text
//! L = w1 * (L_policy - entropy_coef * H) + w2 * L_value + w3 * L_action
//! ```
//!
//! where `L_action` is the cross-entropy from the expert's action distribution
//! to the policy's, averaged over the minibatch and summed over action branches.
//! With `w3 = 0` or no expert the update is plain PPO.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvSpec};
use crate::neural::{Adam, AdamConfig, Mlp, NeuralError, PolicyNet, Real};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("rollout buffer is empty")]
    EmptyBuffer,
    #[error("rollout buffer has not been finished with a bootstrap value")]
    Unfinished,
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Which expert signal feeds the cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertTarget {
    /// The expert's full per-state action distribution.
    #[default]
    Distribution,
    /// One-hot on an action sampled from the expert.
    SampledAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    /// w1
    pub policy_coef: f64,
    /// w2
    pub value_coef: f64,
    pub lr: f64,
    pub horizon: usize,
    pub max_grad_norm: Option<f64>,
    pub expert_target: ExpertTarget,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 10,
            minibatch: 64,
            entropy_coef: 0.0,
            policy_coef: 1.0,
            value_coef: 1.0,
            lr: 3e-4,
            horizon: 1024,
            max_grad_norm: Some(0.5),
            expert_target: ExpertTarget::Distribution,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err("gamma must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gae_lambda must be in [0, 1]".into());
        }
        if self.clip <= 0.0 || self.epochs == 0 || self.minibatch == 0 || self.horizon == 0 || self.lr <= 0.0 {
            return Err("clip, epochs, minibatch, horizon and lr must be positive".into());
        }
        Ok(())
    }
}

/// How a stored step ended, for bootstrapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepEnd {
    /// The episode continues into the next stored step.
    Continue,
    /// Task end: bootstrap from zero.
    Terminated,
    /// Time-limit cut: bootstrap from the value of the final observation.
    Truncated { next_value: f64 },
}

/// Generalized advantage estimates and returns (`advantages + values`).
/// `last_value` bootstraps the final step when it is `Continue`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    ends: &[StepEnd],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n || ends.len() != n {
        return Err(PpoError::Length(format!(
            "rewards {n}, values {}, flags {}",
            values.len(),
            ends.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let (next_value, cont) = match ends[t] {
            StepEnd::Continue => (if t + 1 < n { values[t + 1] } else { last_value }, 1.0),
            StepEnd::Terminated => (0.0, 0.0),
            StepEnd::Truncated { next_value } => (next_value, 0.0),
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        carry = delta + gamma * lambda * cont * carry;
        adv[t] = carry;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Fixed-horizon on-policy storage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub n_branches: usize,
    pub obs: Vec<f32>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub ends: Vec<StepEnd>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize, n_branches: usize) -> Self {
        RolloutBuffer {
            obs_dim,
            n_branches,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            log_probs: Vec::new(),
            ends: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn clear(&mut self) {
        let (d, b) = (self.obs_dim, self.n_branches);
        *self = RolloutBuffer::new(d, b);
    }

    pub fn push(&mut self, obs: &[f32], action: &Action, reward: f64, value: f64, log_prob: f64, end: StepEnd) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.0.len(), self.n_branches);
        self.obs.extend_from_slice(obs);
        self.actions.extend_from_slice(&action.0);
        self.rewards.push(reward);
        self.values.push(value);
        self.log_probs.push(log_prob);
        self.ends.push(end);
        self.advantages.clear();
        self.returns.clear();
    }

    /// Computes advantages and returns; `last_value` is V of the observation
    /// following the final stored step.
    pub fn finish(&mut self, last_value: f64, gamma: f64, lambda: f64) -> Result<(), PpoError> {
        let (adv, ret) = compute_gae(&self.rewards, &self.values, &self.ends, last_value, gamma, lambda)?;
        self.advantages = adv;
        self.returns = ret;
        Ok(())
    }

    pub fn obs_row(&self, i: usize) -> &[f32] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> &[usize] {
        &self.actions[i * self.n_branches..(i + 1) * self.n_branches]
    }
}

/// Normalizes to zero mean and unit (population) standard deviation.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.len() < 2 {
        return xs.to_vec();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return xs.iter().map(|x| x - mean).collect();
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// Clipped surrogate `-mean(min(r A, clip(r, 1-e, 1+e) A))` with
/// `r = exp(new - old)`. Returns the loss, its gradient with respect to each
/// new log-probability, and the fraction of samples whose ratio left the
/// clip range.
pub fn clipped_surrogate<T: Real>(new_lp: &[T], old_lp: &[T], adv: &[T], clip: T) -> (T, Vec<T>, f64) {
    let b = T::from_f64(new_lp.len() as f64);
    let (lo, hi) = (T::one() - clip, T::one() + clip);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); new_lp.len()];
    let mut clipped = 0usize;
    for i in 0..new_lp.len() {
        let ratio = (new_lp[i] - old_lp[i]).exp();
        let unclipped = ratio * adv[i];
        let bounded = ratio.max(lo).min(hi) * adv[i];
        if ratio < lo || ratio > hi {
            clipped += 1;
        }
        if unclipped <= bounded {
            loss -= unclipped;
            grad[i] = -unclipped / b;
        } else {
            loss -= bounded;
        }
    }
    (loss / b, grad, clipped as f64 / new_lp.len().max(1) as f64)
}

/// Mean squared error and its gradient with respect to the predictions.
pub fn value_mse<T: Real>(pred: &[T], returns: &[T]) -> (T, Vec<T>) {
    let b = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(returns)
        .map(|(&p, &r)| {
            loss += (p - r) * (p - r);
            two * (p - r) / b
        })
        .collect();
    (loss / b, grad)
}

/// `w1 * L_policy + w2 * L_value + w3 * L_action`.
pub fn combined_loss(l_policy: f64, l_value: f64, l_action: f64, w1: f64, w2: f64, w3: f64) -> f64 {
    w1 * l_policy + w2 * l_value + w3 * l_action
}

/// Mean over the batch of the branch-summed expert-to-policy cross-entropy.
/// `expert_probs` and `policy_log_probs` are `batch x n_logits` in head layout.
pub fn action_loss<T: Real>(expert_probs: &[T], policy_log_probs: &[T], n_logits: usize) -> Result<T, PpoError> {
    if expert_probs.len() != policy_log_probs.len() || n_logits == 0 || expert_probs.len() % n_logits != 0 {
        return Err(PpoError::Length(format!(
            "expert {} vs policy {} (row {n_logits})",
            expert_probs.len(),
            policy_log_probs.len()
        )));
    }
    let rows = expert_probs.len() / n_logits;
    let total = expert_probs.iter().zip(policy_log_probs).fold(T::zero(), |acc, (&q, &l)| acc - q * l);
    Ok(total / T::from_f64(rows.max(1) as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyLossWeights {
    /// w1
    pub policy: f64,
    pub entropy: f64,
    /// w3
    pub action: f64,
}

/// One minibatch for the policy-side loss. Rows are laid out as in the
/// rollout buffer.
#[derive(Debug, Clone, Copy)]
pub struct PolicyBatch<'a, T> {
    pub obs: &'a [T],
    pub actions: &'a [usize],
    pub old_log_probs: &'a [T],
    pub advantages: &'a [T],
    /// `batch x n_logits` target distributions; required when the action weight
    /// is non-zero.
    pub expert_probs: Option<&'a [T]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyLossStats {
    pub policy_loss: f64,
    pub entropy: f64,
    pub action_loss: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Policy-side loss `w1 * (L_policy - c_ent * H) + w3 * L_action`; accumulates
/// its parameter gradient into `grads`.
pub fn policy_loss_and_grad<T: Real>(
    net: &PolicyNet<T>,
    batch: &PolicyBatch<T>,
    clip: f64,
    w: PolicyLossWeights,
    grads: &mut [T],
) -> Result<PolicyLossStats, PpoError> {
    let n_logits = net.head.n_logits();
    let nb = net.head.branches().len();
    let b = batch.old_log_probs.len();
    if batch.advantages.len() != b || batch.actions.len() != b * nb {
        return Err(PpoError::Length("policy batch rows disagree".into()));
    }
    let tape = net.mlp.forward_tape(batch.obs, b)?;
    let logits = tape.output();
    let new_lp: Vec<T> = (0..b)
        .map(|i| net.head.log_prob(&logits[i * n_logits..(i + 1) * n_logits], &batch.actions[i * nb..(i + 1) * nb]))
        .collect();
    let (l_policy, dlp, clip_fraction) =
        clipped_surrogate(&new_lp, batch.old_log_probs, batch.advantages, T::from_f64(clip));

    let mut out_grad = vec![T::zero(); b * n_logits];
    let mut entropy = T::zero();
    let mut l_action = T::zero();
    let inv_b = T::from_f64(1.0 / b as f64);
    let w1 = T::from_f64(w.policy);
    let went = T::from_f64(w.policy * w.entropy);
    let w3 = T::from_f64(w.action);
    for i in 0..b {
        let z = &logits[i * n_logits..(i + 1) * n_logits];
        let g = &mut out_grad[i * n_logits..(i + 1) * n_logits];
        net.head.log_prob_grad(z, &batch.actions[i * nb..(i + 1) * nb], w1 * dlp[i], g);
        entropy += net.head.entropy(z);
        if w.entropy != 0.0 {
            net.head.entropy_grad(z, -went * inv_b, g);
        }
        if w.action != 0.0 {
            let target = batch
                .expert_probs
                .ok_or_else(|| PpoError::Length("action weight set but no expert distribution".into()))?;
            let q = &target[i * n_logits..(i + 1) * n_logits];
            l_action += net.head.cross_entropy(q, z);
            net.head.cross_entropy_grad(q, z, w3 * inv_b, g);
        }
    }
    entropy = entropy * inv_b;
    l_action = l_action * inv_b;
    net.mlp.backward(&tape, &out_grad, grads)?;

    let approx_kl = new_lp
        .iter()
        .zip(batch.old_log_probs)
        .map(|(&n, &o)| {
            let log_ratio = (n - o).as_f64();
            log_ratio.exp() - 1.0 - log_ratio
        })
        .sum::<f64>()
        / b as f64;
    let total = w.policy * (l_policy.as_f64() - w.entropy * entropy.as_f64()) + w.action * l_action.as_f64();
    Ok(PolicyLossStats {
        policy_loss: l_policy.as_f64(),
        entropy: entropy.as_f64(),
        action_loss: l_action.as_f64(),
        total,
        clip_fraction,
        approx_kl,
    })
}

/// `w2 * mse(V(obs), returns)`; accumulates its gradient into `grads`.
pub fn value_loss_and_grad<T: Real>(
    net: &Mlp<T>,
    obs: &[T],
    returns: &[T],
    weight: f64,
    grads: &mut [T],
) -> Result<f64, PpoError> {
    let tape = net.forward_tape(obs, returns.len())?;
    let (loss, mut g) = value_mse(tape.output(), returns);
    let w = T::from_f64(weight);
    g.iter_mut().for_each(|v| *v *= w);
    net.backward(&tape, &g, grads)?;
    Ok(loss.as_f64())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub action_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// Policy and value networks with their optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoLearner {
    pub config: PpoConfig,
    pub policy: PolicyNet<f32>,
    pub value: Mlp<f32>,
    pub policy_opt: Adam<f32>,
    pub value_opt: Adam<f32>,
}

impl PpoLearner {
    pub fn new(spec: &EnvSpec, hidden: &[usize], config: PpoConfig, rng: &mut Rng) -> Self {
        let policy = PolicyNet::new(spec.observation_dim, hidden, &spec.action_branch_cardinalities, rng);
        let mut dims = vec![spec.observation_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let value = Mlp::orthogonal(&dims, 1.0, rng);
        let adam = AdamConfig { lr: config.lr, ..Default::default() };
        PpoLearner {
            policy_opt: Adam::new(policy.mlp.n_params(), adam),
            value_opt: Adam::new(value.n_params(), adam),
            policy,
            value,
            config,
        }
    }

    pub fn value_of(&self, obs: &[f32]) -> Result<f64, PpoError> {
        Ok(self.value.forward(obs, 1)?[0] as f64)
    }

    /// Samples an action; returns it with its log-probability and the value
    /// estimate of `obs`.
    pub fn act(&self, obs: &[f32], rng: &mut Rng) -> Result<(Action, f64, f64), PpoError> {
        let (a, lp) = self.policy.act(obs, rng)?;
        Ok((a, lp as f64, self.value_of(obs)?))
    }

    /// `epochs` shuffled passes of `minibatch`-sized steps over a finished
    /// buffer. The expert term is active when `expert` is given and `w3 > 0`.
    pub fn update(
        &mut self,
        buf: &RolloutBuffer,
        expert: Option<&PolicyNet<f32>>,
        w3: f64,
        rng: &mut Rng,
    ) -> Result<UpdateStats, PpoError> {
        if buf.is_empty() {
            return Err(PpoError::EmptyBuffer);
        }
        if buf.advantages.len() != buf.len() {
            return Err(PpoError::Unfinished);
        }
        let cfg = self.config.clone();
        let n = buf.len();
        let n_logits = self.policy.head.n_logits();
        let guided = expert.filter(|_| w3 > 0.0);
        let targets: Option<Vec<f32>> = match guided {
            Some(e) => Some(expert_targets(e, &buf.obs, n, cfg.expert_target, rng)?),
            None => None,
        };

        let mut idx: Vec<usize> = (0..n).collect();
        let mut stats = UpdateStats::default();
        let mut gp = vec![0f32; self.policy.mlp.n_params()];
        let mut gv = vec![0f32; self.value.n_params()];
        let d = buf.obs_dim;
        let nb = buf.n_branches;
        let w = PolicyLossWeights { policy: cfg.policy_coef, entropy: cfg.entropy_coef, action: if guided.is_some() { w3 } else { 0.0 } };
        for _ in 0..cfg.epochs {
            idx.shuffle(rng);
            for chunk in idx.chunks(cfg.minibatch) {
                let m = chunk.len();
                let mut obs = Vec::with_capacity(m * d);
                let mut acts = Vec::with_capacity(m * nb);
                let mut old = Vec::with_capacity(m);
                let mut raw_adv = Vec::with_capacity(m);
                let mut ret = Vec::with_capacity(m);
                let mut tgt = Vec::with_capacity(if targets.is_some() { m * n_logits } else { 0 });
                for &i in chunk {
                    obs.extend_from_slice(buf.obs_row(i));
                    acts.extend_from_slice(buf.action_row(i));
                    old.push(buf.log_probs[i] as f32);
                    raw_adv.push(buf.advantages[i]);
                    ret.push(buf.returns[i] as f32);
                    if let Some(t) = &targets {
                        tgt.extend_from_slice(&t[i * n_logits..(i + 1) * n_logits]);
                    }
                }
                let adv: Vec<f32> = normalize(&raw_adv).into_iter().map(|a| a as f32).collect();
                gp.iter_mut().for_each(|g| *g = 0.0);
                gv.iter_mut().for_each(|g| *g = 0.0);
                let batch = PolicyBatch {
                    obs: &obs,
                    actions: &acts,
                    old_log_probs: &old,
                    advantages: &adv,
                    expert_probs: targets.as_ref().map(|_| tgt.as_slice()),
                };
                let ps = policy_loss_and_grad(&self.policy, &batch, cfg.clip, w, &mut gp)?;
                let vl = value_loss_and_grad(&self.value, &obs, &ret, cfg.value_coef, &mut gv)?;
                if let Some(max) = cfg.max_grad_norm {
                    clip_joint(&mut gp, &mut gv, max);
                }
                self.policy_opt.step(self.policy.mlp.params_mut(), &gp)?;
                self.value_opt.step(self.value.params_mut(), &gv)?;

                stats.policy_loss += ps.policy_loss;
                stats.value_loss += vl;
                stats.action_loss += ps.action_loss;
                stats.entropy += ps.entropy;
                stats.approx_kl += ps.approx_kl;
                stats.clip_fraction += ps.clip_fraction;
                stats.minibatches += 1;
            }
        }
        let k = stats.minibatches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.action_loss /= k;
        stats.entropy /= k;
        stats.approx_kl /= k;
        stats.clip_fraction /= k;
        Ok(stats)
    }
}

/// Clips two gradient vectors by their joint L2 norm.
fn clip_joint(a: &mut [f32], b: &mut [f32], max: f64) {
    let sq = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
    let norm = (sq(a) + sq(b)).sqrt();
    if norm > max {
        let s = (max / (norm + 1e-6)) as f32;
        a.iter_mut().for_each(|g| *g *= s);
        b.iter_mut().for_each(|g| *g *= s);
    }
}

/// Expert targets for every buffered observation, in head layout.
fn expert_targets(
    expert: &PolicyNet<f32>,
    obs: &[f32],
    n: usize,
    mode: ExpertTarget,
    rng: &mut Rng,
) -> Result<Vec<f32>, PpoError> {
    let logits = expert.mlp.forward(obs, n)?;
    let k = expert.head.n_logits();
    let mut out = Vec::with_capacity(n * k);
    for row in logits.chunks_exact(k) {
        match mode {
            ExpertTarget::Distribution => out.extend(expert.head.probs(row)),
            ExpertTarget::SampledAction => {
                let a = expert.head.sample(row, rng);
                let mut onehot = vec![0f32; k];
                let mut off = 0;
                for (&v, &card) in a.0.iter().zip(expert.head.branches()) {
                    onehot[off + v] = 1.0;
                    off += card;
                }
                out.extend(onehot);
            }
        }
    }
    Ok(out)
}
