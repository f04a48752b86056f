//! River-lite: a camera agent flies along a closed river modeled as a
//! Catmull-Rom spline. It is rewarded for sweeping its centerline projection
//! over segments it has not covered yet and fails (reward -1) when it leaves the
//! river volume, turns too far from the river direction, hits a bridge, or stops
//! making progress. The observation is a body-frame water mask plus altitude.

use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Env, EnvError, EnvSpec, Observation, StepResult};
use crate::rng::{self, Rng};
use crate::spline::{point_segment_distance, Projection, RiverSpline, SplineError, P2, P3};

pub const MASK_SIDE: usize = 16;
/// Metres covered by the mask, forward and across.
pub const MASK_EXTENT: f64 = 16.0;
pub const OBS_DIM: usize = MASK_SIDE * MASK_SIDE + 1;
pub const BRANCHES: usize = 4;
pub const BRANCH_VALUES: usize = 3;
pub const TIME_LIMIT: usize = 1000;
pub const FAIL_REWARD: f64 = -1.0;
/// Reward for covering the whole river once.
pub const COVERAGE_REWARD: f64 = 10.0;
/// Reset yaw jitter around the tangent direction.
pub const RESET_YAW_JITTER_DEG: f64 = 30.0;

/// Per-branch deltas for values 0, 1, 2: up/down (m), yaw (deg),
/// forward/backward (m), left/right (m).
pub const ACTION_TABLE: [[f64; 3]; BRANCHES] = [
    [1.0, 0.0, -1.0],
    [10.0, 0.0, -10.0],
    [1.0, 0.0, -1.0],
    [0.5, 0.0, -0.5],
];

#[derive(Debug, Error)]
pub enum RiverError {
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("invalid river config: {0}")]
    Config(String),
    #[error("could not parse river config: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: P3,
    pub max: P3,
}

impl Aabb {
    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    pub fn cube(center: P3, side: f64) -> Self {
        let h = side / 2.0;
        Aabb {
            min: [center[0] - h, center[1] - h, center[2] - h],
            max: [center[0] + h, center[1] + h, center[2] + h],
        }
    }
}

/// A side channel that shows up as water in the observation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tributary {
    pub points: Vec<P2>,
    pub half_width: f64,
}

impl Tributary {
    pub fn contains(&self, p: P2) -> bool {
        self.points
            .windows(2)
            .any(|w| point_segment_distance(p, w[0], w[1]).0 <= self.half_width)
    }
}

/// River map and task parameters. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiverConfig {
    pub control_points: Vec<P3>,
    pub half_widths: Vec<f64>,
    pub n_segments: usize,
    /// Lowest allowed altitude (m).
    pub h1: f64,
    /// Highest allowed altitude (m).
    pub h2: f64,
    /// Full acceptable yaw range around the river direction (degrees).
    pub alpha_deg: f64,
    pub no_progress_limit: usize,
    pub agent_collider_side: f64,
    #[serde(default)]
    pub obstacles: Vec<Aabb>,
    #[serde(default)]
    pub tributaries: Vec<Tributary>,
    #[serde(default)]
    pub time_limit: Option<usize>,
    /// Seed for the start-state stream when the environment is built from this
    /// map without an explicit reset seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for RiverConfig {
    /// A wavy loop of about 200 m with varying width, one bridge and one
    /// tributary.
    fn default() -> Self {
        let n = 12;
        let mut control_points = Vec::with_capacity(n);
        let mut half_widths = Vec::with_capacity(n);
        for i in 0..n {
            let a = TAU * i as f64 / n as f64;
            let r = 32.0 + 5.0 * (3.0 * a).sin();
            control_points.push([round3(r * a.cos()), round3(r * a.sin()), 0.0]);
            half_widths.push(round3(5.0 + 1.5 * (2.0 * a).cos()));
        }
        RiverConfig {
            control_points,
            half_widths,
            n_segments: 200,
            h1: 1.0,
            h2: 15.0,
            alpha_deg: 150.0,
            no_progress_limit: 50,
            agent_collider_side: 0.5,
            // A bridge deck across the channel at the bottom of the loop.
            obstacles: vec![Aabb { min: [-1.0, -48.0, 8.0], max: [1.0, -26.0, 30.0] }],
            tributaries: vec![Tributary { points: vec![[0.0, 27.0], [4.0, 36.0], [7.0, 46.0]], half_width: 2.5 }],
            time_limit: Some(TIME_LIMIT),
            seed: None,
        }
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl RiverConfig {
    pub fn from_toml(text: &str) -> Result<Self, RiverError> {
        let cfg: RiverConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("river config serializes")
    }

    pub fn validate(&self) -> Result<(), RiverError> {
        let bad = |m: &str| Err(RiverError::Config(m.to_string()));
        if !(self.h1 > 0.0 && self.h1 < self.h2) {
            return bad("need 0 < h1 < h2");
        }
        if !(self.alpha_deg > 0.0 && self.alpha_deg < 360.0) {
            return bad("need 0 < alpha_deg < 360");
        }
        if self.no_progress_limit == 0 || self.agent_collider_side <= 0.0 {
            return bad("no_progress_limit and agent_collider_side must be positive");
        }
        if self.tributaries.iter().any(|t| t.points.len() < 2 || t.half_width <= 0.0) {
            return bad("tributaries need two points and a positive half-width");
        }
        Ok(())
    }

    pub fn half_alpha(&self) -> f64 {
        self.alpha_deg.to_radians() / 2.0
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a.rem_euclid(TAU);
    if x > PI {
        x -= TAU;
    }
    x
}

/// Angle between `yaw` and the closer of the two directions along `tangent`.
pub fn yaw_error(yaw: f64, tangent: P2) -> f64 {
    let heading = tangent[1].atan2(tangent[0]);
    let d = wrap_angle(yaw - heading).abs();
    d.min(PI - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub position: P3,
    pub yaw: f64,
}

impl AgentPose {
    pub fn forward(&self) -> P2 {
        [self.yaw.cos(), self.yaw.sin()]
    }

    pub fn left(&self) -> P2 {
        [-self.yaw.sin(), self.yaw.cos()]
    }

    pub fn xy(&self) -> P2 {
        [self.position[0], self.position[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Failure {
    OutOfVolume,
    Yaw,
    Collision,
    NoProgress,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiverState {
    pub pose: AgentPose,
    pub visited: Vec<bool>,
    pub last_projection_index: usize,
    pub steps_since_progress: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiverEnv {
    config: RiverConfig,
    spline: RiverSpline,
    spec: EnvSpec,
    state: RiverState,
    visited_count: usize,
    finished: bool,
    last_failure: Option<Failure>,
    rng: Rng,
}

impl RiverEnv {
    pub fn new(config: RiverConfig) -> Result<Self, RiverError> {
        config.validate()?;
        let spline = RiverSpline::build(&config.control_points, &config.half_widths, config.n_segments)?;
        let spec = EnvSpec {
            observation_dim: OBS_DIM,
            action_branch_cardinalities: vec![BRANCH_VALUES; BRANCHES],
            max_episode_steps: config.time_limit.unwrap_or(TIME_LIMIT),
        };
        let rng = match config.seed {
            Some(s) => rng::stream(s, "river-lite"),
            None => rng::from_entropy(),
        };
        let n = spline.n_segments();
        let start = spline.points[0];
        let mut env = RiverEnv {
            config,
            spline,
            spec,
            state: RiverState {
                pose: AgentPose { position: [start[0], start[1], 1.0], yaw: 0.0 },
                visited: vec![false; n],
                last_projection_index: 0,
                steps_since_progress: 0,
            },
            visited_count: 0,
            finished: true,
            last_failure: None,
            rng,
        };
        env.sample_start();
        Ok(env)
    }

    pub fn config(&self) -> &RiverConfig {
        &self.config
    }

    pub fn spline(&self) -> &RiverSpline {
        &self.spline
    }

    pub fn state(&self) -> &RiverState {
        &self.state
    }

    pub fn pose(&self) -> AgentPose {
        self.state.pose
    }

    pub fn visited_count(&self) -> usize {
        self.visited_count
    }

    pub fn last_failure(&self) -> Option<Failure> {
        self.last_failure
    }

    pub fn project(&self, p: P2) -> Projection {
        self.spline.project(p)
    }

    /// Places the agent at `pose` with nothing visited, as if just reset there.
    pub fn set_pose(&mut self, pose: AgentPose) {
        let n = self.spline.n_segments();
        self.state = RiverState {
            pose,
            visited: vec![false; n],
            last_projection_index: self.spline.project(pose.xy()).segment,
            steps_since_progress: 0,
        };
        self.visited_count = 0;
        self.finished = false;
        self.last_failure = None;
    }

    /// True where the horizontal point is water: main channel or tributary.
    pub fn is_water(&self, p: P2) -> bool {
        self.spline.contains(p) || self.config.tributaries.iter().any(|t| t.contains(p))
    }

    /// Failure checks in order: volume, yaw, collision. No-progress is handled
    /// in `step` because it depends on the visitation update.
    pub fn check_pose(&self, pose: &AgentPose) -> Option<Failure> {
        let z = pose.position[2];
        let pr = self.spline.project(pose.xy());
        if z < self.config.h1 || z > self.config.h2 || pr.distance > self.spline.half_width_at(pr.segment, pr.t) {
            return Some(Failure::OutOfVolume);
        }
        if yaw_error(pose.yaw, self.spline.tangents[pr.segment]) > self.config.half_alpha() {
            return Some(Failure::Yaw);
        }
        let body = Aabb::cube(pose.position, self.config.agent_collider_side);
        if self.config.obstacles.iter().any(|b| b.intersects(&body)) {
            return Some(Failure::Collision);
        }
        None
    }

    /// Segments swept going from `from` to `to` along the shorter wrapped
    /// direction, inclusive, at most N/4 + 1 of them ending at `to`.
    pub fn swept_segments(&self, from: usize, to: usize) -> Vec<usize> {
        let n = self.spline.n_segments();
        let fwd = (to + n - from) % n;
        let bwd = (from + n - to) % n;
        let (len, dir) = if fwd <= bwd { (fwd, 1isize) } else { (bwd, -1isize) };
        let len = len.min(n / 4);
        (0..=len)
            .map(|i| (to as isize - dir * i as isize).rem_euclid(n as isize) as usize)
            .collect()
    }

    pub fn observe(&self) -> Observation {
        let pose = self.state.pose;
        let (f, l) = (pose.forward(), pose.left());
        let cell = MASK_EXTENT / MASK_SIDE as f64;
        let mut v = Vec::with_capacity(OBS_DIM);
        // Row 0 is the far edge; column 0 is the leftmost.
        for row in 0..MASK_SIDE {
            let ahead = MASK_EXTENT - (row as f64 + 0.5) * cell;
            for col in 0..MASK_SIDE {
                let side = MASK_EXTENT / 2.0 - (col as f64 + 0.5) * cell;
                let p = [
                    pose.position[0] + ahead * f[0] + side * l[0],
                    pose.position[1] + ahead * f[1] + side * l[1],
                ];
                v.push(if self.is_water(p) { 1.0 } else { 0.0 });
            }
        }
        v.push(((pose.position[2] - self.config.h1) / (self.config.h2 - self.config.h1)) as f32);
        Observation(v)
    }

    fn sample_start(&mut self) {
        let n = self.spline.n_segments();
        loop {
            let k = self.rng.random_range(0..n);
            let t: f64 = self.rng.random_range(0.0..1.0);
            let u: f64 = self.rng.random_range(-1.0..1.0);
            let z = self.rng.random_range(self.config.h1..self.config.h2);
            let sign = if self.rng.random_bool(0.5) { 0.0 } else { PI };
            let jitter = self.rng.random_range(-1.0..1.0) * RESET_YAW_JITTER_DEG.to_radians();

            let (a, b) = self.spline.segment(k);
            let tan = self.spline.tangents[k];
            let normal = [-tan[1], tan[0]];
            let hw = self.spline.half_width_at(k, t);
            let x = a[0] + t * (b[0] - a[0]) + u * hw * normal[0];
            let y = a[1] + t * (b[1] - a[1]) + u * hw * normal[1];
            let nearest = self.spline.project([x, y]);
            let heading = self.spline.tangents[nearest.segment];
            let yaw = wrap_angle(heading[1].atan2(heading[0]) + sign + jitter);
            let pose = AgentPose { position: [x, y, z], yaw };
            if self.check_pose(&pose).is_none() {
                self.set_pose(pose);
                return;
            }
        }
    }

    /// Top-down ASCII map: `~` water, `#` obstacle, `A` agent, `+` visited
    /// centerline.
    pub fn render_ascii(&self, cols: usize, rows: usize) -> String {
        let pts = &self.spline.points;
        let pad = self.spline.max_half_width() + 2.0;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in pts {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k] - pad);
                hi[k] = hi[k].max(p[k] + pad);
            }
        }
        let agent = self.state.pose.xy();
        let cw = (hi[0] - lo[0]) / cols as f64;
        let ch = (hi[1] - lo[1]) / rows as f64;
        let mut s = String::new();
        for r in 0..rows {
            for c in 0..cols {
                let p = [lo[0] + (c as f64 + 0.5) * cw, hi[1] - (r as f64 + 0.5) * ch];
                let near_agent = (p[0] - agent[0]).abs() <= cw / 2.0 && (p[1] - agent[1]).abs() <= ch / 2.0;
                let on_obstacle = self.config.obstacles.iter().any(|b| {
                    p[0] >= b.min[0] && p[0] <= b.max[0] && p[1] >= b.min[1] && p[1] <= b.max[1]
                });
                let ch_out = if near_agent {
                    'A'
                } else if on_obstacle {
                    '#'
                } else if self.is_water(p) {
                    let pr = self.spline.project(p);
                    if pr.distance < cw.max(ch) && self.state.visited[pr.segment] { '+' } else { '~' }
                } else {
                    '.'
                };
                s.push(ch_out);
            }
            s.push('\n');
        }
        s
    }
}

impl Env for RiverEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: Option<u64>) -> Observation {
        if let Some(seed) = seed {
            self.rng = rng::stream(seed, "river-lite");
        }
        self.sample_start();
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeFinished);
        }
        action.validate(&self.spec.action_branch_cardinalities)?;
        let a = action.branches();
        let dz = ACTION_TABLE[0][a[0]];
        let dyaw = ACTION_TABLE[1][a[1]].to_radians();
        let dfwd = ACTION_TABLE[2][a[2]];
        let dleft = ACTION_TABLE[3][a[3]];

        // Rotate first, then translate in the new body frame; altitude is world z.
        let mut pose = self.state.pose;
        pose.yaw = wrap_angle(pose.yaw + dyaw);
        let (f, l) = (pose.forward(), pose.left());
        pose.position[0] += dfwd * f[0] + dleft * l[0];
        pose.position[1] += dfwd * f[1] + dleft * l[1];
        pose.position[2] += dz;
        self.state.pose = pose;

        let current = self.spline.project(pose.xy()).segment;
        let swept = self.swept_segments(self.state.last_projection_index, current);
        let newly = swept.iter().filter(|&&k| !self.state.visited[k]).count();

        let failure = self.check_pose(&pose).or_else(|| {
            (newly == 0 && self.state.steps_since_progress + 1 >= self.config.no_progress_limit)
                .then_some(Failure::NoProgress)
        });
        let obs = self.observe();
        if let Some(fail) = failure {
            self.finished = true;
            self.last_failure = Some(fail);
            return Ok(StepResult { observation: obs, reward: FAIL_REWARD, terminated: true, truncated: false });
        }

        for k in swept {
            self.state.visited[k] = true;
        }
        self.visited_count += newly;
        self.state.last_projection_index = current;
        let n = self.spline.n_segments();
        let reward = if newly > 0 {
            self.state.steps_since_progress = 0;
            COVERAGE_REWARD * newly as f64 / n as f64
        } else {
            self.state.steps_since_progress += 1;
            0.0
        };
        let terminated = self.visited_count == n;
        self.finished = terminated;
        Ok(StepResult { observation: obs, reward, terminated, truncated: false })
    }
}
