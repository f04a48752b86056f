//! The environment contract shared by both track-following tasks.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cliff::CliffCircular;
use crate::river::{RiverConfig, RiverEnv};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    EpisodeFinished,
    #[error("invalid action: {0}")]
    InvalidAction(String),
}

/// Flat observation vector handed to the learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<f32>);

impl Deref for Observation {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

/// One small integer per action branch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Vec<usize>);

impl Action {
    pub fn single(a: usize) -> Self {
        Action(vec![a])
    }

    pub fn branches(&self) -> &[usize] {
        &self.0
    }

    /// Checks branch count and per-branch range against `cards`.
    pub fn validate(&self, cards: &[usize]) -> Result<(), EnvError> {
        if self.0.len() != cards.len() {
            return Err(EnvError::InvalidAction(format!(
                "expected {} branches, got {}",
                cards.len(),
                self.0.len()
            )));
        }
        for (i, (&a, &n)) in self.0.iter().zip(cards).enumerate() {
            if a >= n {
                return Err(EnvError::InvalidAction(format!(
                    "branch {i} value {a} out of range 0..{n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    /// Task-defined end (cliff, failure, full coverage).
    pub terminated: bool,
    /// Time-limit end.
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub observation_dim: usize,
    pub action_branch_cardinalities: Vec<usize>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn action_logits(&self) -> usize {
        self.action_branch_cardinalities.iter().sum()
    }
}

pub trait Env {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode. `Some(seed)` reseeds the environment's generator;
    /// `None` keeps drawing from the current stream.
    fn reset(&mut self, seed: Option<u64>) -> Observation;

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError>;
}

/// Ends an episode with `truncated = true` on its `limit`-th step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeLimit<E> {
    inner: E,
    limit: usize,
    elapsed: usize,
    spec: EnvSpec,
}

impl<E: Env> TimeLimit<E> {
    pub fn new(inner: E, limit: usize) -> Self {
        assert!(limit > 0, "time limit must be positive");
        let mut spec = inner.spec().clone();
        spec.max_episode_steps = limit;
        TimeLimit { inner, limit, elapsed: 0, spec }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    pub fn elapsed(&self) -> usize {
        self.elapsed
    }
}

impl<E: Env> Env for TimeLimit<E> {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: Option<u64>) -> Observation {
        self.elapsed = 0;
        self.inner.reset(seed)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        let mut res = self.inner.step(action)?;
        self.elapsed += 1;
        if self.elapsed >= self.limit && !res.terminated {
            res.truncated = true;
        }
        Ok(res)
    }
}

/// The two environments this crate ships.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    CliffCircular,
    RiverLite,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::CliffCircular => "cliff-circular",
            EnvKind::RiverLite => "river-lite",
        }
    }

    /// Exact duplicate removal only makes sense for discrete observations.
    pub fn dedup_transitions(self) -> bool {
        matches!(self, EnvKind::CliffCircular)
    }

    pub fn default_time_limit(self) -> usize {
        match self {
            EnvKind::CliffCircular => crate::cliff::TIME_LIMIT,
            EnvKind::RiverLite => crate::river::TIME_LIMIT,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cliff-circular" | "cliff" => Ok(EnvKind::CliffCircular),
            "river-lite" | "river" => Ok(EnvKind::RiverLite),
            other => Err(format!("unknown environment '{other}' (expected cliff-circular or river-lite)")),
        }
    }
}

/// Either environment behind one concrete, serializable type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AnyEnv {
    Cliff(CliffCircular),
    River(Box<RiverEnv>),
}

impl AnyEnv {
    pub fn new(kind: EnvKind, river: Option<&RiverConfig>) -> Self {
        match kind {
            EnvKind::CliffCircular => AnyEnv::Cliff(CliffCircular::new()),
            EnvKind::RiverLite => {
                let cfg = river.cloned().unwrap_or_default();
                AnyEnv::River(Box::new(RiverEnv::new(cfg).expect("invalid river map")))
            }
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            AnyEnv::Cliff(_) => EnvKind::CliffCircular,
            AnyEnv::River(_) => EnvKind::RiverLite,
        }
    }
}

impl Env for AnyEnv {
    fn spec(&self) -> &EnvSpec {
        match self {
            AnyEnv::Cliff(e) => e.spec(),
            AnyEnv::River(e) => e.spec(),
        }
    }

    fn reset(&mut self, seed: Option<u64>) -> Observation {
        match self {
            AnyEnv::Cliff(e) => e.reset(seed),
            AnyEnv::River(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        match self {
            AnyEnv::Cliff(e) => e.step(action),
            AnyEnv::River(e) => e.step(action),
        }
    }
}

/// A time-limited environment with the default limit for its kind.
pub fn make_env(kind: EnvKind, river: Option<&RiverConfig>) -> TimeLimit<AnyEnv> {
    TimeLimit::new(AnyEnv::new(kind, river), kind.default_time_limit())
}
