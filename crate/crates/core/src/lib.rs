//! Track-following environments and a PPO learner guided by a behavior-cloning
//! expert that is retrained online from the learner's own good episodes.
//!
//! The crate is organized bottom-up:
//!
//! * [`env`] – the reset/step contract, time-limit wrapper and seeding.
//! * [`cliff`] – the 12x12 CliffCircular grid world.
//! * [`spline`], [`river`] – the geometric river-following environment.
//! * [`neural`] – MLPs with hand-derived gradients, Adam, categorical heads.
//! * [`ppo`] – rollout buffer, GAE, clipped losses, expert cross-entropy.
//! * [`bc`] – demonstration dataset and behavior cloning.
//! * [`oracle`] – scripted demonstrators and keyboard play.
//! * [`synergy`] – the interleaved training loop and its baselines.
//! * [`io`], [`export`] – file formats, metrics and figure data.

pub mod bc;
pub mod cliff;
pub mod env;
pub mod export;
pub mod io;
pub mod neural;
pub mod oracle;
pub mod ppo;
pub mod river;
pub mod rng;
pub mod spline;
pub mod synergy;

pub use env::{Action, Env, EnvError, EnvKind, EnvSpec, Observation, StepResult, TimeLimit};

pub use neural::{Adam, AdamConfig, Mlp, MultiCategorical, PolicyNet};
pub use ppo::{PpoConfig, PpoLearner, RolloutBuffer, StepEnd};
pub use rng::Rng;
