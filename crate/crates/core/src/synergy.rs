//! The interleaved training loop: PPO rollouts and updates, periodic
//! evaluation, harvesting of high-reward evaluation episodes into the
//! demonstration set, expert retraining and the w3 schedule.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bc::{BcConfig, BcError, BcExpert, DemoDataset, Trajectory};
use crate::env::{make_env, AnyEnv, Env, EnvError, EnvKind, TimeLimit};
use crate::neural::{Mlp, NeuralError, PolicyNet};
use crate::ppo::{PpoConfig, PpoError, PpoLearner, RolloutBuffer, StepEnd, UpdateStats};
use crate::river::RiverConfig;
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum SynergyError {
    #[error("method {0} needs demonstrations for its expert")]
    MissingDemos(Method),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Bc(#[from] BcError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("{0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ppo,
    StaticBc,
    DynamicBc,
    PpoStaticBc,
    PpoDynamicBc,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Ppo, Method::StaticBc, Method::DynamicBc, Method::PpoStaticBc, Method::PpoDynamicBc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ppo => "ppo",
            Method::StaticBc => "static_bc",
            Method::DynamicBc => "dynamic_bc",
            Method::PpoStaticBc => "ppo_static_bc",
            Method::PpoDynamicBc => "ppo_dynamic_bc",
        }
    }

    pub fn uses_ppo(self) -> bool {
        matches!(self, Method::Ppo | Method::PpoStaticBc | Method::PpoDynamicBc)
    }

    pub fn needs_expert(self) -> bool {
        self != Method::Ppo
    }

    /// Whether qualifying evaluation episodes are added to the dataset and the
    /// expert retrained.
    pub fn harvests(self) -> bool {
        matches!(self, Method::DynamicBc | Method::PpoDynamicBc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected ppo, static_bc, dynamic_bc, ppo_static_bc or ppo_dynamic_bc)"))
    }
}

/// Expert-loss weight: starts high and drops once, when the learner's
/// evaluation mean first beats the expert's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W3Schedule {
    pub initial: f64,
    pub after: f64,
    pub value: f64,
    pub latched: bool,
}

impl W3Schedule {
    pub fn new(initial: f64, after: f64) -> Self {
        W3Schedule { initial, after, value: initial, latched: false }
    }

    pub fn update(&mut self, eval_ppo_mean: f64, eval_bc_mean: f64) -> f64 {
        if !self.latched && eval_ppo_mean > eval_bc_mean {
            self.value = self.after;
            self.latched = true;
        }
        self.value
    }
}

impl Default for W3Schedule {
    fn default() -> Self {
        W3Schedule::new(1.0, 0.2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynergyConfig {
    pub env: EnvKind,
    pub method: Method,
    pub seed: u64,
    pub total_steps: usize,
    pub t_reward: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Episodes used to measure the expert's baseline for the w3 decision.
    pub baseline_episodes: usize,
    /// Hidden widths of the policy and value networks.
    pub hidden: Vec<usize>,
    pub w3_initial: f64,
    pub w3_after: f64,
    pub ppo: PpoConfig,
    pub bc: BcConfig,
    pub river: Option<RiverConfig>,
}

impl SynergyConfig {
    /// Defaults for an environment.
    pub fn for_env(env: EnvKind, method: Method, seed: u64) -> Self {
        let (total_steps, t_reward, eval_every, hidden) = match env {
            EnvKind::CliffCircular => (100_000, 18.0, 10_000, vec![64, 64]),
            EnvKind::RiverLite => (140_000, 4.0, 5_000, vec![256, 256]),
        };
        SynergyConfig {
            env,
            method,
            seed,
            total_steps,
            t_reward,
            eval_every,
            eval_episodes: 10,
            baseline_episodes: 10,
            bc: BcConfig { hidden: hidden.clone(), ..Default::default() },
            hidden,
            w3_initial: 1.0,
            w3_after: 0.2,
            ppo: PpoConfig::default(),
            river: (env == EnvKind::RiverLite).then(RiverConfig::default),
        }
    }

    pub fn validate(&self) -> Result<(), SynergyError> {
        let bad = |m: &str| Err(SynergyError::Config(m.to_string()));
        if self.total_steps == 0 || self.eval_every == 0 || self.eval_episodes == 0 || self.baseline_episodes == 0 {
            return bad("total_steps, eval_every, eval_episodes and baseline_episodes must be positive");
        }
        if self.hidden.contains(&0) || self.bc.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.t_reward.is_finite() && self.w3_initial >= 0.0 && self.w3_after >= 0.0) {
            return bad("t_reward must be finite and w3 weights non-negative");
        }
        if self.bc.minibatch == 0 || self.bc.lr <= 0.0 {
            return bad("bc minibatch and lr must be positive");
        }
        self.ppo.validate().map_err(SynergyError::Config)?;
        if let Some(r) = &self.river {
            if self.env != EnvKind::RiverLite {
                return bad("river map given for a non-river environment");
            }
            r.validate().map_err(|e| SynergyError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Rows in the metrics table: one per full rollout.
    pub fn n_iterations(&self) -> usize {
        self.total_steps / self.ppo.horizon
    }
}

/// Outcome of an evaluation batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rewards: Vec<f64>,
    pub lengths: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
}

impl EvalResult {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }

    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<usize>() as f64 / self.lengths.len().max(1) as f64
    }
}

/// Runs `episodes` episodes of stochastic `policy` on a fresh environment
/// seeded from `seed`.
pub fn evaluate(
    policy: &PolicyNet<f32>,
    kind: EnvKind,
    river: Option<&RiverConfig>,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult, SynergyError> {
    let mut env = make_env(kind, river);
    let mut act_rng = rng::stream(seed, "eval-act");
    let mut obs = env.reset(Some(rng::derive_seed(seed, "eval-env"))).0;
    let mut out = EvalResult { rewards: Vec::new(), lengths: Vec::new(), trajectories: Vec::new() };
    for _ in 0..episodes {
        let mut traj = Trajectory::default();
        loop {
            let (a, _) = policy.act(&obs, &mut act_rng)?;
            let r = env.step(&a)?;
            traj.push(&obs, &a, r.reward);
            let done = r.done();
            obs = r.observation.0;
            if done {
                break;
            }
        }
        out.rewards.push(traj.episodic_reward());
        out.lengths.push(traj.len());
        out.trajectories.push(traj);
        obs = env.reset(None).0;
    }
    Ok(out)
}

/// Trajectories whose episodic reward is strictly above `t_reward`.
pub fn harvest(trajectories: &[Trajectory], t_reward: f64) -> Vec<&Trajectory> {
    trajectories.iter().filter(|t| t.episodic_reward() > t_reward).collect()
}

/// One metrics row, written after every rollout/update cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_ep_reward_100: Option<f64>,
    pub mean_ep_len_100: Option<f64>,
    pub eval_mean: Option<f64>,
    pub eval_len: Option<f64>,
    pub w3: f64,
    pub dataset_transitions: usize,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub action_loss: Option<f64>,
}

/// A completed evaluation and what followed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub index: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub rewards: Vec<f64>,
    /// Expert evaluation mean used for the w3 decision, if there is an expert.
    pub bc_baseline: Option<f64>,
    pub w3: f64,
    pub harvested: usize,
    pub added_transitions: usize,
    /// The last evaluation, run after training ends; it does not harvest.
    pub is_final: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestWeights {
    pub step: usize,
    pub eval_mean: f64,
    pub policy: Mlp<f32>,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub iteration: usize,
    pub env: TimeLimit<AnyEnv>,
    pub obs: Vec<f32>,
    pub episode_reward: f64,
    pub episode_length: usize,
    pub recent_rewards: VecDeque<f64>,
    pub recent_lengths: VecDeque<usize>,
    pub act_rng: Rng,
    pub update_rng: Rng,
    pub bc_rng: Rng,
    pub learner: Option<PpoLearner>,
    pub expert: Option<BcExpert>,
    pub dataset: Option<DemoDataset>,
    pub w3: W3Schedule,
    pub bc_initial: Option<f64>,
    pub bc_baseline: Option<f64>,
    pub bc_train_accuracy: Option<f64>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<BestWeights>,
    pub metrics: Vec<MetricsRow>,
    pub finished: bool,
}

/// Something the trainer reports while running.
#[derive(Debug, Clone, Copy)]
pub enum Event<'a> {
    Row(&'a MetricsRow),
    Eval(&'a EvalRecord),
}

pub const RECENT_EPISODES: usize = 100;

pub struct Trainer {
    pub config: SynergyConfig,
    pub state: TrainerState,
}

impl Trainer {
    /// Builds networks, pre-trains the expert on `demos` (required for every
    /// method but PPO) and measures its evaluation baseline.
    pub fn new(config: SynergyConfig, demos: Option<DemoDataset>) -> Result<Self, SynergyError> {
        config.validate()?;
        let seed = config.seed;
        let mut env = make_env(config.env, config.river.as_ref());
        let spec = env.spec().clone();
        let obs = env.reset(Some(rng::derive_seed(seed, "train-env"))).0;
        let mut init_rng = rng::stream(seed, "init");
        let mut bc_rng = rng::stream(seed, "bc");

        let learner = config
            .method
            .uses_ppo()
            .then(|| PpoLearner::new(&spec, &config.hidden, config.ppo.clone(), &mut init_rng));

        let (mut expert, mut dataset, mut bc_initial, mut acc) = (None, None, None, None);
        if config.method.needs_expert() {
            let data = demos.ok_or(SynergyError::MissingDemos(config.method))?;
            if data.is_empty() {
                return Err(SynergyError::MissingDemos(config.method));
            }
            if data.obs_dim() != spec.observation_dim || data.n_branches() != spec.action_branch_cardinalities.len() {
                return Err(SynergyError::Config("demonstrations do not match the environment".into()));
            }
            let mut data = data;
            data.set_dedup(config.env.dedup_transitions());
            let mut bc = BcExpert::new(&spec, config.bc.clone(), &mut init_rng);
            acc = Some(bc.pretrain(&data, &mut bc_rng)?.accuracy);
            let base = evaluate(&bc.policy, config.env, config.river.as_ref(), config.baseline_episodes, eval_seed(seed, 0))?;
            bc_initial = Some(base.mean_reward());
            expert = Some(bc);
            dataset = Some(data);
        }
        let w3 = if config.method.uses_ppo() && config.method.needs_expert() {
            W3Schedule::new(config.w3_initial, config.w3_after)
        } else {
            W3Schedule::new(0.0, 0.0)
        };
        let state = TrainerState {
            step: 0,
            iteration: 0,
            env,
            obs,
            episode_reward: 0.0,
            episode_length: 0,
            recent_rewards: VecDeque::with_capacity(RECENT_EPISODES),
            recent_lengths: VecDeque::with_capacity(RECENT_EPISODES),
            act_rng: rng::stream(seed, "act"),
            update_rng: rng::stream(seed, "update"),
            bc_rng,
            learner,
            expert,
            dataset,
            w3,
            bc_initial,
            bc_baseline: bc_initial,
            bc_train_accuracy: acc,
            evals: Vec::new(),
            best: None,
            metrics: Vec::new(),
            finished: false,
        };
        Ok(Trainer { config, state })
    }

    pub fn from_state(config: SynergyConfig, mut state: TrainerState) -> Result<Self, SynergyError> {
        config.validate()?;
        if let Some(d) = state.dataset.as_mut() {
            d.reindex();
        }
        Ok(Trainer { config, state })
    }

    /// The policy that acts during training and evaluation.
    pub fn acting_policy(&self) -> &PolicyNet<f32> {
        match (&self.state.learner, &self.state.expert) {
            (Some(l), _) => &l.policy,
            (None, Some(e)) => &e.policy,
            (None, None) => unreachable!("every method has a learner or an expert"),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    /// Runs to completion.
    pub fn run(&mut self, on_event: impl FnMut(&Trainer, Event<'_>) -> Result<(), SynergyError>) -> Result<(), SynergyError> {
        self.run_until(usize::MAX, on_event)
    }

    /// Runs whole iterations until `max_iterations` have been completed in
    /// total or training ends.
    pub fn run_until(
        &mut self,
        max_iterations: usize,
        mut on_event: impl FnMut(&Trainer, Event<'_>) -> Result<(), SynergyError>,
    ) -> Result<(), SynergyError> {
        let total = self.config.n_iterations();
        while self.state.iteration < total.min(max_iterations) {
            let stats = self.iteration()?;
            let prev = self.state.step;
            self.state.step += self.config.ppo.horizon;
            self.state.iteration += 1;
            let eval = if self.state.step / self.config.eval_every > prev / self.config.eval_every {
                Some(self.evaluation(false)?)
            } else {
                None
            };
            let row = self.metrics_row(stats, eval.as_ref());
            self.state.metrics.push(row);
            if let Some(e) = &eval {
                on_event(self, Event::Eval(e))?;
            }
            on_event(self, Event::Row(self.state.metrics.last().expect("just pushed")))?;
        }
        if self.state.iteration == total && !self.state.finished {
            let already = self.state.evals.last().is_some_and(|e| e.step == self.state.step);
            if !already {
                let e = self.evaluation(true)?;
                on_event(self, Event::Eval(&e))?;
            } else if let Some(e) = self.state.evals.last_mut() {
                e.is_final = true;
            }
            self.state.finished = true;
        }
        Ok(())
    }

    /// One horizon of interaction, followed by a PPO update when the method has
    /// a learner.
    fn iteration(&mut self) -> Result<Option<UpdateStats>, SynergyError> {
        let horizon = self.config.ppo.horizon;
        let s = &mut self.state;
        let spec = s.env.spec().clone();
        let mut buf = RolloutBuffer::new(spec.observation_dim, spec.action_branch_cardinalities.len());
        for _ in 0..horizon {
            let (action, logp, value) = match &s.learner {
                Some(l) => l.act(&s.obs, &mut s.act_rng)?,
                None => {
                    let e = s.expert.as_ref().expect("expert-only method");
                    (e.policy.act(&s.obs, &mut s.act_rng)?.0, 0.0, 0.0)
                }
            };
            let r = s.env.step(&action)?;
            s.episode_reward += r.reward;
            s.episode_length += 1;
            let end = if r.terminated {
                StepEnd::Terminated
            } else if r.truncated {
                let next_value = match &s.learner {
                    Some(l) => l.value_of(&r.observation)?,
                    None => 0.0,
                };
                StepEnd::Truncated { next_value }
            } else {
                StepEnd::Continue
            };
            if s.learner.is_some() {
                buf.push(&s.obs, &action, r.reward, value, logp, end);
            }
            if r.done() {
                if s.recent_rewards.len() == RECENT_EPISODES {
                    s.recent_rewards.pop_front();
                    s.recent_lengths.pop_front();
                }
                s.recent_rewards.push_back(s.episode_reward);
                s.recent_lengths.push_back(s.episode_length);
                s.episode_reward = 0.0;
                s.episode_length = 0;
                s.obs = s.env.reset(None).0;
            } else {
                s.obs = r.observation.0;
            }
        }
        let Some(learner) = s.learner.as_mut() else { return Ok(None) };
        let last_value = learner.value_of(&s.obs)?;
        buf.finish(last_value, self.config.ppo.gamma, self.config.ppo.gae_lambda)?;
        let expert = if self.config.method.uses_ppo() { s.expert.as_ref().map(|e| &e.policy) } else { None };
        let stats = learner.update(&buf, expert, s.w3.value, &mut s.update_rng)?;
        Ok(Some(stats))
    }

    fn evaluation(&mut self, is_final: bool) -> Result<EvalRecord, SynergyError> {
        let cfg = &self.config;
        let index = self.state.evals.len() + 1;
        let seed = eval_seed(cfg.seed, index);
        let result = evaluate(self.acting_policy(), cfg.env, cfg.river.as_ref(), cfg.eval_episodes, seed)?;
        let mean = result.mean_reward();
        let s = &mut self.state;

        let baseline = s.bc_baseline;
        if let (true, Some(b)) = (cfg.method.uses_ppo(), baseline) {
            s.w3.update(mean, b);
        }
        if s.best.as_ref().is_none_or(|b| mean > b.eval_mean) {
            let policy = match (&s.learner, &s.expert) {
                (Some(l), _) => l.policy.mlp.clone(),
                (None, Some(e)) => e.policy.mlp.clone(),
                (None, None) => unreachable!("every method has a learner or an expert"),
            };
            s.best = Some(BestWeights { step: s.step, eval_mean: mean, policy });
        }
        let (mut harvested, mut added) = (0, 0);
        if cfg.method.harvests() && !is_final {
            let accepted = harvest(&result.trajectories, cfg.t_reward);
            harvested = accepted.len();
            let data = s.dataset.as_mut().expect("harvesting methods carry a dataset");
            for t in accepted {
                added += data.append(t)?;
            }
            if harvested > 0 {
                let expert = s.expert.as_mut().expect("harvesting methods carry an expert");
                expert.retrain(data, &mut s.bc_rng)?;
                let remeasured = evaluate(&expert.policy, cfg.env, cfg.river.as_ref(), cfg.baseline_episodes, seed)?;
                s.bc_baseline = Some(remeasured.mean_reward());
            }
        }
        let record = EvalRecord {
            step: s.step,
            index,
            mean_reward: mean,
            mean_length: result.mean_length(),
            rewards: result.rewards,
            bc_baseline: baseline,
            w3: s.w3.value,
            harvested,
            added_transitions: added,
            is_final,
        };
        s.evals.push(record.clone());
        Ok(record)
    }

    fn metrics_row(&self, stats: Option<UpdateStats>, eval: Option<&EvalRecord>) -> MetricsRow {
        let s = &self.state;
        let n = s.recent_rewards.len();
        let mean = |xs: f64| (n > 0).then_some(xs / n as f64);
        MetricsRow {
            step: s.step,
            mean_ep_reward_100: mean(s.recent_rewards.iter().sum()),
            mean_ep_len_100: mean(s.recent_lengths.iter().sum::<usize>() as f64),
            eval_mean: eval.map(|e| e.mean_reward),
            eval_len: eval.map(|e| e.mean_length),
            w3: s.w3.value,
            dataset_transitions: s.dataset.as_ref().map_or(0, DemoDataset::len),
            policy_loss: stats.map(|u| u.policy_loss),
            value_loss: stats.map(|u| u.value_loss),
            action_loss: stats.map(|u| u.action_loss),
        }
    }
}

/// Seed of the `index`-th evaluation of a run; index 0 is the expert's
/// pre-training baseline.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &format!("eval-{index}"))
}

/// Pre-trains a BC expert on `demos` and evaluates it; used for calibration
/// reports.
pub fn pretrain_and_evaluate(
    kind: EnvKind,
    demos: &DemoDataset,
    bc: BcConfig,
    river: Option<&RiverConfig>,
    episodes: usize,
    seed: u64,
) -> Result<(BcExpert, f64, EvalResult), SynergyError> {
    let env = make_env(kind, river);
    let mut init = rng::stream(seed, "init");
    let mut expert = BcExpert::new(env.spec(), bc, &mut init);
    let acc = expert.pretrain(demos, &mut rng::stream(seed, "bc"))?.accuracy;
    let eval = evaluate(&expert.policy, kind, river, episodes, eval_seed(seed, 0))?;
    Ok((expert, acc, eval))
}
