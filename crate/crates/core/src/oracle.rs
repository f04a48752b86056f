//! Demonstration sources: scripted experts for both environments and a
//! line-based keyboard player.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bc::Trajectory;
use crate::cliff::{self, Cell, CliffCircular, MOVES, N_ACTIONS};
use crate::env::{make_env, Action, AnyEnv, Env, EnvError, EnvKind, TimeLimit};
use crate::river::{wrap_angle, RiverConfig, RiverEnv};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("input ended before the episode finished")]
    InputClosed,
}

/// Privileged CliffCircular expert: shortest cliff-free path to the next
/// unvisited ring cell in clockwise order, with probability `epsilon` of a
/// uniformly random action instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCliffExpert {
    pub epsilon: f64,
}

impl ScriptedCliffExpert {
    pub fn act(&self, env: &CliffCircular, rng: &mut Rng) -> Action {
        if self.epsilon > 0.0 && rng.random_bool(self.epsilon) {
            return Action::single(rng.random_range(0..N_ACTIONS));
        }
        Action::single(Self::greedy_move(env))
    }

    /// The noiseless move.
    pub fn greedy_move(env: &CliffCircular) -> usize {
        let layout = env.layout();
        let ring = &layout.track_cells;
        let visited = &env.state().visited_track;
        let agent = env.agent();
        let p = env.projection();
        let n = ring.len();
        // Standing on an unvisited ring cell, a move along the ring only marks
        // the next one, so the own cell is picked up last.
        let order: Vec<usize> = if ring[p] == agent {
            (1..=n).map(|k| (p + k) % n).collect()
        } else {
            (0..n).map(|k| (p + k) % n).collect()
        };
        let Some(target) = order.into_iter().find(|&j| !visited[j]).map(|j| ring[j]) else {
            return 0;
        };
        if target == agent {
            return 0;
        }
        first_move(agent, target, |c| cliff::in_grid(c) && !layout.is_cliff(c)).unwrap_or(0)
    }
}

/// First action of a shortest 4-connected path, exploring moves in action
/// order.
fn first_move(from: Cell, to: Cell, walkable: impl Fn(Cell) -> bool) -> Option<usize> {
    let idx = |c: Cell| cliff::row_major(c);
    let mut first = vec![usize::MAX; (cliff::WIDTH * cliff::HEIGHT) as usize];
    let mut queue = VecDeque::new();
    first[idx(from)] = 0;
    queue.push_back(from);
    while let Some(c) = queue.pop_front() {
        for (a, &(dr, dc)) in MOVES.iter().enumerate().skip(1) {
            let next = (c.0 + dr, c.1 + dc);
            if !walkable(next) || first[idx(next)] != usize::MAX {
                continue;
            }
            first[idx(next)] = if c == from { a } else { first[idx(c)] };
            if next == to {
                return Some(first[idx(next)]);
            }
            queue.push_back(next);
        }
    }
    None
}

/// Privileged river-lite expert: follows the centerline in whichever direction
/// it starts facing, correcting yaw and lateral offset and holding altitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiverFollower {
    pub altitude: f64,
    pub yaw_deadband_deg: f64,
    pub lateral_deadband: f64,
    pub epsilon: f64,
}

impl Default for RiverFollower {
    fn default() -> Self {
        RiverFollower { altitude: 3.0, yaw_deadband_deg: 5.0, lateral_deadband: 0.5, epsilon: 0.0 }
    }
}

impl RiverFollower {
    pub fn act(&self, env: &RiverEnv, rng: &mut Rng) -> Action {
        if self.epsilon > 0.0 && rng.random_bool(self.epsilon) {
            return Action((0..crate::river::BRANCHES).map(|_| rng.random_range(0..3)).collect());
        }
        self.greedy(env)
    }

    pub fn greedy(&self, env: &RiverEnv) -> Action {
        let spline = env.spline();
        let n = spline.n_segments();
        let pose = env.pose();
        let pr = env.project(pose.xy());
        let tan = spline.tangents[pr.segment];
        let fwd = pose.forward();
        let downstream = fwd[0] * tan[0] + fwd[1] * tan[1] >= 0.0;
        let (ahead, dir) = if downstream {
            (spline.tangents[(pr.segment + 1) % n], 1.0)
        } else {
            (spline.tangents[(pr.segment + n - 1) % n], -1.0)
        };
        let heading = (dir * ahead[1]).atan2(dir * ahead[0]);
        let err = wrap_angle(heading - pose.yaw);
        let band = self.yaw_deadband_deg.to_radians();
        let yaw = if err > band { 0 } else if err < -band { 2 } else { 1 };

        let (a, _) = spline.segment(pr.segment);
        let d = [pose.position[0] - a[0], pose.position[1] - a[1]];
        // Offset to the left of the direction of travel.
        let off = dir * (-d[0] * tan[1] + d[1] * tan[0]);
        let lat = if off > self.lateral_deadband { 2 } else if off < -self.lateral_deadband { 0 } else { 1 };

        let z = pose.position[2];
        let alt = if z > self.altitude + 0.5 { 2 } else if z < self.altitude - 0.5 { 0 } else { 1 };
        Action(vec![alt, yaw, 0, lat])
    }
}

/// Summary of one batch of scripted episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub cliff_falls: usize,
}

/// Runs the cliff expert for `episodes` full episodes from one seeded stream.
pub fn cliff_expert_stats(expert: ScriptedCliffExpert, episodes: usize, seed: u64) -> EpisodeStats {
    let mut env = make_env(EnvKind::CliffCircular, None);
    let mut act_rng = rng::stream(seed, "expert-noise");
    env.reset(Some(rng::derive_seed(seed, "expert-env")));
    let (mut total, mut len, mut falls) = (0.0, 0usize, 0usize);
    for _ in 0..episodes {
        let t = run_cliff_episode(&mut env, expert, &mut act_rng, usize::MAX);
        total += t.episodic_reward();
        len += t.len();
        falls += usize::from(t.rews.last() == Some(&cliff::CLIFF_REWARD));
        env.reset(None);
    }
    EpisodeStats {
        episodes,
        mean_reward: total / episodes as f64,
        mean_length: len as f64 / episodes as f64,
        cliff_falls: falls,
    }
}

fn cliff_inner(env: &TimeLimit<AnyEnv>) -> &CliffCircular {
    match env.inner() {
        AnyEnv::Cliff(c) => c,
        AnyEnv::River(_) => panic!("expected a CliffCircular environment"),
    }
}

fn river_inner(env: &TimeLimit<AnyEnv>) -> &RiverEnv {
    match env.inner() {
        AnyEnv::River(r) => r,
        AnyEnv::Cliff(_) => panic!("expected a river-lite environment"),
    }
}

/// One episode from the env's current state (already reset), capped at
/// `max_steps`.
fn run_cliff_episode(
    env: &mut TimeLimit<AnyEnv>,
    expert: ScriptedCliffExpert,
    rng: &mut Rng,
    max_steps: usize,
) -> Trajectory {
    let mut traj = Trajectory::default();
    let mut obs = cliff_inner(env).observe().0;
    while traj.len() < max_steps {
        let a = expert.act(cliff_inner(env), rng);
        let r = env.step(&a).expect("episode in progress");
        traj.push(&obs, &a, r.reward);
        let done = r.done();
        obs = r.observation.0;
        if done {
            break;
        }
    }
    traj
}

fn run_river_episode(env: &mut TimeLimit<AnyEnv>, expert: RiverFollower, rng: &mut Rng, max_steps: usize) -> Trajectory {
    let mut traj = Trajectory::default();
    let mut obs = river_inner(env).observe().0;
    while traj.len() < max_steps {
        let a = expert.act(river_inner(env), rng);
        let r = env.step(&a).expect("episode in progress");
        traj.push(&obs, &a, r.reward);
        let done = r.done();
        obs = r.observation.0;
        if done {
            break;
        }
    }
    traj
}

/// Result of the noise-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target: f64,
    pub epsilon: f64,
    pub stats: EpisodeStats,
    /// (epsilon, mean reward) for every candidate tried.
    pub sweep: Vec<(f64, f64)>,
}

/// Picks the noise rate on a fixed grid whose mean episode reward over
/// `episodes` episodes is closest to `target`. All candidates share the same
/// seeds.
pub fn calibrate_cliff_expert(target: f64, episodes: usize, seed: u64) -> Calibration {
    let grid: Vec<f64> = (0..=30).map(|k| k as f64 * 0.005).collect();
    let sweep: Vec<(f64, EpisodeStats)> = grid
        .iter()
        .map(|&epsilon| (epsilon, cliff_expert_stats(ScriptedCliffExpert { epsilon }, episodes, seed)))
        .collect();
    let (epsilon, stats) = sweep
        .iter()
        .min_by(|a, b| (a.1.mean_reward - target).abs().total_cmp(&(b.1.mean_reward - target).abs()))
        .copied()
        .expect("non-empty grid");
    Calibration { target, epsilon, stats, sweep: sweep.iter().map(|(e, s)| (*e, s.mean_reward)).collect() }
}

/// Episode cap for river-lite demonstrations.
pub const RIVER_DEMO_STEPS: usize = 50;
/// Episodes used to calibrate the cliff expert.
pub const CALIBRATION_EPISODES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoMetadata {
    pub env: EnvKind,
    pub source: String,
    pub seed: u64,
    pub trajectories: usize,
    pub transitions: usize,
    pub mean_reward: f64,
    pub epsilon: f64,
    pub calibration: Option<Calibration>,
}

/// Collects `n` scripted demonstrations. For CliffCircular the noise rate is
/// calibrated toward a mean reward of 0 unless `epsilon` is given. River-lite
/// episodes are cut at [`RIVER_DEMO_STEPS`].
pub fn collect_scripted(
    kind: EnvKind,
    n: usize,
    seed: u64,
    epsilon: Option<f64>,
    river: Option<&RiverConfig>,
) -> (Vec<Trajectory>, DemoMetadata) {
    let mut env = make_env(kind, river);
    let mut act_rng = rng::stream(seed, "demo-noise");
    env.reset(Some(rng::derive_seed(seed, "demo-env")));
    let mut calibration = None;
    let mut trajs = Vec::with_capacity(n);
    let eps;
    match kind {
        EnvKind::CliffCircular => {
            eps = match epsilon {
                Some(e) => e,
                None => {
                    let c = calibrate_cliff_expert(0.0, CALIBRATION_EPISODES, rng::derive_seed(seed, "calibration"));
                    let e = c.epsilon;
                    calibration = Some(c);
                    e
                }
            };
            let expert = ScriptedCliffExpert { epsilon: eps };
            for _ in 0..n {
                trajs.push(run_cliff_episode(&mut env, expert, &mut act_rng, usize::MAX));
                env.reset(None);
            }
        }
        EnvKind::RiverLite => {
            eps = epsilon.unwrap_or(0.0);
            let expert = RiverFollower { epsilon: eps, ..Default::default() };
            for _ in 0..n {
                trajs.push(run_river_episode(&mut env, expert, &mut act_rng, RIVER_DEMO_STEPS));
                env.reset(None);
            }
        }
    }
    let transitions = trajs.iter().map(Trajectory::len).sum();
    let mean_reward = trajs.iter().map(Trajectory::episodic_reward).sum::<f64>() / n.max(1) as f64;
    let meta = DemoMetadata {
        env: kind,
        source: "scripted".into(),
        seed,
        trajectories: n,
        transitions,
        mean_reward,
        epsilon: eps,
        calibration,
    };
    (trajs, meta)
}

/// Key bindings for keyboard play.
pub fn keymap(kind: EnvKind) -> &'static [(char, &'static str)] {
    match kind {
        EnvKind::CliffCircular => &[('w', "up"), ('d', "right"), ('s', "down"), ('a', "left"), ('x', "stay")],
        EnvKind::RiverLite => &[
            ('w', "forward"),
            ('s', "backward"),
            ('a', "turn left"),
            ('d', "turn right"),
            ('q', "strafe left"),
            ('e', "strafe right"),
            ('r', "climb"),
            ('f', "descend"),
            ('x', "hover"),
        ],
    }
}

/// Maps a key to an action, `None` for unbound keys.
pub fn key_action(kind: EnvKind, key: char) -> Option<Action> {
    match kind {
        EnvKind::CliffCircular => {
            let a = match key {
                'x' => 0,
                'w' => 1,
                'd' => 2,
                's' => 3,
                'a' => 4,
                _ => return None,
            };
            Some(Action::single(a))
        }
        EnvKind::RiverLite => {
            let mut a = vec![1; crate::river::BRANCHES];
            match key {
                'r' => a[0] = 0,
                'f' => a[0] = 2,
                'a' => a[1] = 0,
                'd' => a[1] = 2,
                'w' => a[2] = 0,
                's' => a[2] = 2,
                'q' => a[3] = 0,
                'e' => a[3] = 2,
                'x' => {}
                _ => return None,
            }
            Some(Action(a))
        }
    }
}

fn render(env: &TimeLimit<AnyEnv>) -> String {
    match env.inner() {
        AnyEnv::Cliff(c) => c.render_ascii(),
        AnyEnv::River(r) => r.render_ascii(72, 36),
    }
}

/// Plays `episodes` episodes from line-based input: every bound key on a line
/// is one step. After each episode the player answers `y` to keep it.
pub fn keyboard_play(
    kind: EnvKind,
    river: Option<&RiverConfig>,
    episodes: usize,
    seed: u64,
    input: &mut impl BufRead,
    out: &mut impl Write,
) -> Result<Vec<Trajectory>, OracleError> {
    let mut env = make_env(kind, river);
    let mut obs = env.reset(Some(rng::derive_seed(seed, "keyboard-env"))).0;
    let keys: Vec<String> = keymap(kind).iter().map(|(k, what)| format!("{k}={what}")).collect();
    let mut kept = Vec::new();
    let mut line = String::new();
    for ep in 0..episodes {
        let mut traj = Trajectory::default();
        let mut total = 0.0;
        'episode: loop {
            write!(out, "{}episode {} step {} reward {:.2}\nkeys: {}\n> ", render(&env), ep + 1, traj.len(), total, keys.join(" "))?;
            out.flush()?;
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(OracleError::InputClosed);
            }
            for key in line.trim().chars() {
                let Some(a) = key_action(kind, key) else { continue };
                let r = env.step(&a)?;
                traj.push(&obs, &a, r.reward);
                total += r.reward;
                let done = r.done();
                obs = r.observation.0;
                if done {
                    break 'episode;
                }
            }
        }
        write!(out, "{}episode over: {} steps, reward {:.2}. keep? [y/n] ", render(&env), traj.len(), total)?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(OracleError::InputClosed);
        }
        if line.trim().eq_ignore_ascii_case("y") {
            kept.push(traj);
        }
        obs = env.reset(None).0;
    }
    Ok(kept)
}
