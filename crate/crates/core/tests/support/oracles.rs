//! Independent re-implementations checked against the library.
#![allow(dead_code)]

use rand::Rng as _;
use synril_core::cliff::{self, CliffCircular, GridLayout};
use synril_core::env::Env;
use synril_core::oracle::RiverFollower;
use synril_core::ppo::{compute_gae, StepEnd};
use synril_core::river::{RiverConfig, RiverEnv, COVERAGE_REWARD};
use synril_core::rng::{stream, Rng};

/// Advantages by explicit discounted sums of TD errors, one start at a time.
fn brute_gae(rewards: &[f64], values: &[f64], ends: &[StepEnd], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let next_value = |t: usize| match ends[t] {
        StepEnd::Terminated => 0.0,
        StepEnd::Truncated { next_value } => next_value,
        StepEnd::Continue => {
            if t + 1 < n {
                values[t + 1]
            } else {
                last
            }
        }
    };
    (0..n)
        .map(|t| {
            let mut adv = 0.0;
            let mut weight = 1.0;
            for l in t..n {
                let delta = rewards[l] + gamma * next_value(l) - values[l];
                adv += weight * delta;
                if !matches!(ends[l], StepEnd::Continue) {
                    break;
                }
                weight *= gamma * lambda;
            }
            adv
        })
        .collect()
}

fn random_episode_data(rng: &mut Rng) -> (Vec<f64>, Vec<f64>, Vec<StepEnd>, f64) {
    let n = rng.random_range(1..300);
    let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..10.0)).collect();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
    let ends = (0..n)
        .map(|_| match rng.random_range(0..20) {
            0 => StepEnd::Terminated,
            1 => StepEnd::Truncated { next_value: rng.random_range(-20.0..20.0) },
            _ => StepEnd::Continue,
        })
        .collect();
    (rewards, values, ends, rng.random_range(-20.0..20.0))
}

/// Largest absolute difference between library and brute-force advantages
/// (and returns) over `sequences` random rollouts.
pub fn gae_max_error(sequences: usize) -> f64 {
    let mut rng = stream(1, "gae-oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..sequences {
        let (r, v, e, last) = random_episode_data(&mut rng);
        let (gamma, lambda) = (rng.random_range(0.8..1.0), rng.random_range(0.0..1.0));
        let (adv, ret) = compute_gae(&r, &v, &e, last, gamma, lambda).unwrap();
        let want = brute_gae(&r, &v, &e, last, gamma, lambda);
        for t in 0..r.len() {
            worst = worst.max((adv[t] - want[t]).abs()).max((ret[t] - (want[t] + v[t])).abs());
        }
    }
    worst
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Points (out of `samples` around the default map) whose library projection
/// picks a different segment than a linear scan over every segment.
pub fn projection_mismatches(samples: usize) -> usize {
    let env = RiverEnv::new(RiverConfig::default()).unwrap();
    let s = env.spline();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &s.points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let margin = 20.0;
    let mut rng = stream(2, "projection-oracle");
    let mut mismatches = 0;
    for _ in 0..samples {
        let p = [rng.random_range(lo[0] - margin..hi[0] + margin), rng.random_range(lo[1] - margin..hi[1] + margin)];
        let mut best = (0, f64::INFINITY);
        for k in 0..s.n_segments() {
            let (a, b) = s.segment(k);
            let d = point_segment_distance(p, a, b);
            if d < best.1 {
                best = (k, d);
            }
        }
        if env.project(p).segment != best.0 {
            mismatches += 1;
        }
    }
    mismatches
}

/// Window extracted from a padded copy of the whole grid.
fn padded_window(layout: &GridLayout, agent: (i32, i32)) -> Vec<f32> {
    let half = cliff::WINDOW / 2;
    let (h, w) = (cliff::HEIGHT + 2 * half, cliff::WIDTH + 2 * half);
    let mut padded = vec![1.0f32; (h * w) as usize];
    for r in 0..cliff::HEIGHT {
        for c in 0..cliff::WIDTH {
            if !layout.is_cliff((r, c)) {
                padded[((r + half) * w + c + half) as usize] = 0.0;
            }
        }
    }
    let mut out = Vec::new();
    for r in agent.0..agent.0 + cliff::WINDOW {
        for c in agent.1..agent.1 + cliff::WINDOW {
            out.push(padded[(r * w + c) as usize]);
        }
    }
    out
}

/// Observations (out of `samples` random layouts and cells) that differ from
/// the padded-grid extraction.
pub fn window_mismatches(samples: usize) -> usize {
    let mut rng = stream(3, "window-oracle");
    let mut env = CliffCircular::new();
    let mut mismatches = 0;
    for i in 0..samples {
        if i % 100 == 0 {
            env.reset(Some(rng.random()));
        }
        let cell = (rng.random_range(0..cliff::HEIGHT), rng.random_range(0..cliff::WIDTH));
        if cliff::observe(env.layout(), cell).0 != padded_window(env.layout(), cell) {
            mismatches += 1;
        }
    }
    mismatches
}

/// Result of driving full coverage of the default map.
pub struct Coverage {
    pub total: f64,
    pub steps: usize,
    /// Steps whose reward differed from 10 * newly visited / N.
    pub reward_mismatches: usize,
    pub covered: bool,
}

/// Follows the centerline from seeded resets until one episode visits every
/// segment.
pub fn full_coverage() -> Coverage {
    let mut env = RiverEnv::new(RiverConfig::default()).unwrap();
    let n = env.spline().n_segments();
    let follower = RiverFollower::default();
    let mut rng = stream(4, "coverage-oracle");
    let mut last = Coverage { total: 0.0, steps: 0, reward_mismatches: 0, covered: false };
    for seed in 0..20 {
        env.reset(Some(seed));
        let mut c = Coverage { total: 0.0, steps: 0, reward_mismatches: 0, covered: false };
        while c.steps < 5 * n {
            let before = env.visited_count();
            let r = env.step(&follower.act(&env, &mut rng)).unwrap();
            c.steps += 1;
            c.total += r.reward;
            let fresh = env.visited_count() - before;
            if env.last_failure().is_none() && r.reward != COVERAGE_REWARD * fresh as f64 / n as f64 {
                c.reward_mismatches += 1;
            }
            if r.terminated {
                c.covered = env.last_failure().is_none() && env.visited_count() == n;
                break;
            }
        }
        if c.covered {
            return c;
        }
        last = c;
    }
    last
}
