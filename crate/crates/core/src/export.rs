//! Figure data: seed-aggregated learning curves, evaluation distributions,
//! episode traces and an overhead SVG of traced trajectories.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cliff::{self, GridLayout};
use crate::env::{make_env, Action, AnyEnv, Env, EnvKind};
use crate::io::Summary;
use crate::neural::PolicyNet;
use crate::river::{RiverConfig, RiverEnv};
use crate::rng;
use crate::synergy::{MetricsRow, SynergyError};

pub const CURVES_VERSION: &str = "# synril-curves v1";
pub const VIOLIN_VERSION: &str = "# synril-violin v1";
/// Trajectory markers are drawn every this many steps.
pub const STAR_EVERY: usize = 50;

/// Learning curves of several runs on a shared step axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub labels: Vec<String>,
    pub steps: Vec<usize>,
    /// `values[run][row]`.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CurveTable {
    /// Aligns runs by step; a run missing a step contributes nothing there.
    pub fn build(runs: &[(String, Vec<MetricsRow>)], column: impl Fn(&MetricsRow) -> Option<f64>) -> Self {
        let mut steps: Vec<usize> = runs.iter().flat_map(|(_, rows)| rows.iter().map(|r| r.step)).collect();
        steps.sort_unstable();
        steps.dedup();
        let values = runs
            .iter()
            .map(|(_, rows)| steps.iter().map(|&s| rows.iter().find(|r| r.step == s).and_then(&column)).collect())
            .collect();
        CurveTable { labels: runs.iter().map(|(l, _)| l.clone()).collect(), steps, values }
    }

    /// Mean, standard error of the mean and sample count at each row.
    pub fn aggregate(&self) -> Vec<(Option<f64>, Option<f64>, usize)> {
        (0..self.steps.len())
            .map(|i| {
                let xs: Vec<f64> = self.values.iter().filter_map(|v| v[i]).collect();
                let n = xs.len();
                if n == 0 {
                    return (None, None, 0);
                }
                let mean = xs.iter().sum::<f64>() / n as f64;
                let se = if n > 1 {
                    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    (var / n as f64).sqrt()
                } else {
                    0.0
                };
                (Some(mean), Some(se), n)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut s = format!("{CURVES_VERSION}\nstep,{},mean,stderr,n\n", self.labels.join(","));
        for (i, (mean, se, n)) in self.aggregate().into_iter().enumerate() {
            let per: Vec<String> = self.values.iter().map(|v| fmt(v[i])).collect();
            let _ = writeln!(s, "{},{},{},{},{}", self.steps[i], per.join(","), fmt(mean), fmt(se), n);
        }
        s
    }
}

/// One row per labelled sample: count, mean, spread and quartiles.
pub fn violin_csv(groups: &[(String, Vec<f64>)]) -> String {
    let mut s = format!("{VIOLIN_VERSION}\nlabel,n,mean,std,min,q1,median,q3,max\n");
    for (label, xs) in groups {
        if let Some(v) = Summary::of(xs) {
            let _ = writeln!(s, "{label},{},{},{},{},{},{},{},{}", v.n, v.mean, v.std, v.min, v.q1, v.median, v.q3, v.max);
        }
    }
    s
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceLine {
    Header {
        episode: usize,
        env: EnvKind,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        river: Option<RiverConfig>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        layout: Option<GridLayout>,
    },
    Step {
        episode: usize,
        t: usize,
        /// x, y, z for river-lite; row, column, 0 for CliffCircular. Position
        /// after the step.
        pos: [f64; 3],
        yaw: f64,
        action: Vec<usize>,
        reward: f64,
        terminated: bool,
        truncated: bool,
    },
}

fn position(env: &AnyEnv) -> ([f64; 3], f64) {
    match env {
        AnyEnv::Cliff(c) => {
            let (r, col) = c.agent();
            ([r as f64, col as f64, 0.0], 0.0)
        }
        AnyEnv::River(r) => {
            let p = r.pose();
            (p.position, p.yaw)
        }
    }
}

/// Rolls out `policy` like [`crate::synergy::evaluate`] with the same seed,
/// recording poses. Each episode starts with a header line and a step line at
/// `t = 0` for the start pose.
pub fn record_traces(
    policy: &PolicyNet<f32>,
    kind: EnvKind,
    river: Option<&RiverConfig>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<TraceLine>, SynergyError> {
    let mut env = make_env(kind, river);
    let mut act_rng = rng::stream(seed, "eval-act");
    let mut obs = env.reset(Some(rng::derive_seed(seed, "eval-env"))).0;
    let mut out = Vec::new();
    for episode in 0..episodes {
        let (layout, river_cfg) = match env.inner() {
            AnyEnv::Cliff(c) => (Some(c.layout().clone()), None),
            AnyEnv::River(r) => (None, Some(r.config().clone())),
        };
        out.push(TraceLine::Header { episode, env: kind, river: river_cfg, layout });
        let (pos, yaw) = position(env.inner());
        out.push(TraceLine::Step {
            episode,
            t: 0,
            pos,
            yaw,
            action: Vec::new(),
            reward: 0.0,
            terminated: false,
            truncated: false,
        });
        let mut t = 0;
        loop {
            let (a, _): (Action, f32) = policy.act(&obs, &mut act_rng)?;
            let r = env.step(&a)?;
            t += 1;
            let (pos, yaw) = position(env.inner());
            out.push(TraceLine::Step {
                episode,
                t,
                pos,
                yaw,
                action: a.0,
                reward: r.reward,
                terminated: r.terminated,
                truncated: r.truncated,
            });
            let done = r.done();
            obs = r.observation.0;
            if done {
                break;
            }
        }
        obs = env.reset(None).0;
    }
    Ok(out)
}

pub fn traces_to_jsonl(lines: &[TraceLine]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).expect("trace lines serialize"));
        s.push('\n');
    }
    s
}

pub fn traces_from_jsonl(text: &str) -> Result<Vec<TraceLine>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn star(cx: f64, cy: f64, r: f64) -> String {
    let pts: Vec<String> = (0..10)
        .map(|k| {
            let rad = if k % 2 == 0 { r } else { r * 0.45 };
            let a = std::f64::consts::PI * k as f64 / 5.0 - std::f64::consts::FRAC_PI_2;
            format!("{:.3},{:.3}", cx + rad * a.cos(), cy + rad * a.sin())
        })
        .collect();
    format!("<polygon class=\"star\" points=\"{}\"/>", pts.join(" "))
}

struct Frame {
    min: [f64; 2],
    scale: f64,
    height: f64,
}

impl Frame {
    /// World y grows upward; SVG y grows downward.
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.min[0]) * self.scale, self.height - (p[1] - self.min[1]) * self.scale)
    }
}

/// Overhead SVG of every traced episode with a star every [`STAR_EVERY`]
/// steps, starting at the start pose.
pub fn traj_svg(lines: &[TraceLine]) -> Result<String, String> {
    let Some(TraceLine::Header { env, river, layout, .. }) = lines.first() else {
        return Err("trace does not start with a header".into());
    };
    let mut episodes: Vec<Vec<(usize, [f64; 3])>> = Vec::new();
    for l in lines {
        match l {
            TraceLine::Header { .. } => episodes.push(Vec::new()),
            TraceLine::Step { t, pos, .. } => episodes.last_mut().expect("header first").push((*t, *pos)),
        }
    }
    let mut body = String::new();
    let (frame, width, height) = match env {
        EnvKind::RiverLite => {
            let cfg = river.clone().ok_or("river trace header without a map")?;
            let map = RiverEnv::new(cfg).map_err(|e| e.to_string())?;
            let (frame, w, h) = river_frame(&map);
            draw_river(&mut body, &map, &frame);
            (frame, w, h)
        }
        EnvKind::CliffCircular => {
            let layout = layout.clone().ok_or("grid trace header without a layout")?;
            let cell = 40.0;
            let side = cliff::WIDTH as f64 * cell;
            draw_grid(&mut body, &layout, cell);
            (Frame { min: [0.0, 0.0], scale: cell, height: side }, side, side)
        }
    };
    let to_xy = |p: [f64; 3]| match env {
        EnvKind::RiverLite => frame.map([p[0], p[1]]),
        // Cell centers, rows downward.
        EnvKind::CliffCircular => ((p[1] + 0.5) * frame.scale, (p[0] + 0.5) * frame.scale),
    };
    for (i, ep) in episodes.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ep
            .iter()
            .map(|&(_, p)| {
                let (x, y) = to_xy(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            body,
            "<polyline class=\"traj\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(body, "<g fill=\"{color}\" stroke=\"black\" stroke-width=\"0.4\">");
        for &(t, p) in ep.iter().filter(|(t, _)| t % STAR_EVERY == 0) {
            let (x, y) = to_xy(p);
            let _ = writeln!(body, "{}<!-- t={t} -->", star(x, y, 6.0));
        }
        body.push_str("</g>\n");
    }
    Ok(format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.2} {height:.2}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    ))
}

fn river_frame(map: &RiverEnv) -> (Frame, f64, f64) {
    let pad = map.spline().max_half_width() + 4.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    let pts = map.spline().points.iter().map(|p| [p[0], p[1]]);
    let trib = map.config().tributaries.iter().flat_map(|t| t.points.iter().copied());
    for p in pts.chain(trib) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k] - pad);
            hi[k] = hi[k].max(p[k] + pad);
        }
    }
    let scale = 8.0;
    let (w, h) = ((hi[0] - lo[0]) * scale, (hi[1] - lo[1]) * scale);
    (Frame { min: lo, scale, height: h }, w, h)
}

fn draw_river(body: &mut String, map: &RiverEnv, frame: &Frame) {
    let s = map.spline();
    let n = s.n_segments();
    let bank = |side: f64| -> String {
        (0..=n)
            .map(|i| {
                let k = i % n;
                let p = s.points[k];
                // Average the neighbouring segment directions for the normal.
                let (a, b) = (s.tangents[(k + n - 1) % n], s.tangents[k]);
                let (tx, ty) = (a[0] + b[0], a[1] + b[1]);
                let len = (tx * tx + ty * ty).sqrt().max(1e-12);
                let off = side * s.point_half_widths[k];
                let (x, y) = frame.map([p[0] - ty / len * off, p[1] + tx / len * off]);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let (left, right) = (bank(1.0), bank(-1.0));
    for t in &map.config().tributaries {
        let pts: Vec<String> = t
            .points
            .iter()
            .map(|&p| {
                let (x, y) = frame.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            body,
            "<polyline class=\"tributary\" fill=\"none\" stroke=\"#9ecae1\" stroke-linecap=\"round\" stroke-width=\"{:.2}\" points=\"{}\"/>",
            2.0 * t.half_width * frame.scale,
            pts.join(" ")
        );
    }
    let _ = writeln!(body, "<polygon class=\"water\" fill=\"#9ecae1\" fill-rule=\"evenodd\" points=\"{left}\"/>");
    let _ = writeln!(body, "<polygon fill=\"white\" points=\"{right}\"/>");
    let _ = writeln!(body, "<polyline class=\"bank\" fill=\"none\" stroke=\"#3182bd\" points=\"{left}\"/>");
    let _ = writeln!(body, "<polyline class=\"bank\" fill=\"none\" stroke=\"#3182bd\" points=\"{right}\"/>");
    let center: Vec<String> = (0..=n)
        .map(|i| {
            let p = s.points[i % n];
            let (x, y) = frame.map([p[0], p[1]]);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        body,
        "<polyline class=\"centerline\" fill=\"none\" stroke=\"#6baed6\" stroke-dasharray=\"4 4\" points=\"{}\"/>",
        center.join(" ")
    );
    for o in &map.config().obstacles {
        let (x0, y0) = frame.map([o.min[0], o.max[1]]);
        let (x1, y1) = frame.map([o.max[0], o.min[1]]);
        let _ = writeln!(
            body,
            "<rect class=\"obstacle\" x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#636363\"/>",
            x1 - x0,
            y1 - y0
        );
    }
}

fn draw_grid(body: &mut String, layout: &GridLayout, cell: f64) {
    for r in 0..cliff::HEIGHT {
        for c in 0..cliff::WIDTH {
            let fill = if layout.is_cliff((r, c)) {
                "#525252"
            } else if layout.track_cells.contains(&(r, c)) {
                "#fdd0a2"
            } else {
                "#f7f7f7"
            };
            let _ = writeln!(
                body,
                "<rect x=\"{:.0}\" y=\"{:.0}\" width=\"{cell:.0}\" height=\"{cell:.0}\" fill=\"{fill}\" stroke=\"#bdbdbd\"/>",
                c as f64 * cell,
                r as f64 * cell
            );
        }
    }
}
