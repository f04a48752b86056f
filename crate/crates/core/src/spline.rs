//! Closed uniform Catmull-Rom splines, arc-length resampling into near-equal
//! segments, and nearest-segment queries on the horizontal plane.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type P3 = [f64; 3];
pub type P2 = [f64; 2];

/// Dense samples per control segment when building arc-length tables.
pub const SAMPLES_PER_SEGMENT: usize = 50;
pub const MIN_SEGMENTS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("a closed Catmull-Rom spline needs at least 4 control points, got {0}")]
    TooFewPoints(usize),
    #[error("need one half-width per control point ({points} points, {widths} widths)")]
    WidthMismatch { points: usize, widths: usize },
    #[error("at least {MIN_SEGMENTS} segments required, got {0}")]
    TooFewSegments(usize),
    #[error("spline has zero length")]
    Degenerate,
    #[error("non-finite or non-positive half-width")]
    BadWidth,
}

/// Point on the closed spline through `points` at parameter `t` of the span
/// from `points[segment]` to `points[segment + 1]` (indices wrap).
pub fn eval_catmull_rom(points: &[P3], segment: usize, t: f64) -> Result<P3, SplineError> {
    let n = points.len();
    if n < 4 {
        return Err(SplineError::TooFewPoints(n));
    }
    let p0 = points[(segment + n - 1) % n];
    let p1 = points[segment % n];
    let p2 = points[(segment + 1) % n];
    let p3 = points[(segment + 2) % n];
    let (t2, t3) = (t * t, t * t * t);
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = 0.5
            * (2.0 * p1[k]
                + (p2[k] - p0[k]) * t
                + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * t2
                + (3.0 * p1[k] - p0[k] - 3.0 * p2[k] + p3[k]) * t3);
    }
    Ok(out)
}

fn dist3(a: P3, b: P3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Horizontal distance from `p` to segment `a`-`b` and the clamped parameter of
/// the closest point.
pub fn point_segment_distance(p: P2, a: P2, b: P2) -> (f64, f64) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    (((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt(), t)
}

/// Result of a nearest-segment query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: usize,
    pub distance: f64,
    /// Position of the closest point along the segment, in `[0, 1]`.
    pub t: f64,
}

/// A closed spline resampled into `N` near-equal-length straight segments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiverSpline {
    pub control_points: Vec<P3>,
    pub half_widths: Vec<f64>,
    /// Resampled points; segment `k` runs from `points[k]` to `points[k+1 mod N]`.
    pub points: Vec<P3>,
    /// Half-width at each resampled point.
    pub point_half_widths: Vec<f64>,
    /// Unit horizontal direction of each segment.
    pub tangents: Vec<P2>,
    pub lengths: Vec<f64>,
    index: SegmentGrid,
}

impl RiverSpline {
    pub fn build(control_points: &[P3], half_widths: &[f64], n_segments: usize) -> Result<Self, SplineError> {
        let n = control_points.len();
        if n < 4 {
            return Err(SplineError::TooFewPoints(n));
        }
        if half_widths.len() != n {
            return Err(SplineError::WidthMismatch { points: n, widths: half_widths.len() });
        }
        if half_widths.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(SplineError::BadWidth);
        }
        if n_segments < MIN_SEGMENTS {
            return Err(SplineError::TooFewSegments(n_segments));
        }
        let (params, cumulative) = arc_length_table(control_points)?;
        let total = *cumulative.last().unwrap();
        if total.partial_cmp(&1e-9) != Some(std::cmp::Ordering::Greater) {
            return Err(SplineError::Degenerate);
        }

        let mut points = Vec::with_capacity(n_segments);
        let mut point_half_widths = Vec::with_capacity(n_segments);
        let mut cursor = 0;
        for j in 0..n_segments {
            let s = total * j as f64 / n_segments as f64;
            while cumulative[cursor + 1] < s {
                cursor += 1;
            }
            let (s0, s1) = (cumulative[cursor], cumulative[cursor + 1]);
            let frac = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
            let u = params[cursor] + frac * (params[cursor + 1] - params[cursor]);
            let seg = (u.floor() as usize).min(n - 1);
            let t = u - seg as f64;
            points.push(eval_catmull_rom(control_points, seg, t)?);
            let (w0, w1) = (half_widths[seg], half_widths[(seg + 1) % n]);
            point_half_widths.push(w0 + t * (w1 - w0));
        }

        let mut tangents = Vec::with_capacity(n_segments);
        let mut lengths = Vec::with_capacity(n_segments);
        for k in 0..n_segments {
            let (a, b) = (points[k], points[(k + 1) % n_segments]);
            lengths.push(dist3(a, b));
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let h = (dx * dx + dy * dy).sqrt();
            if h <= 0.0 {
                return Err(SplineError::Degenerate);
            }
            tangents.push([dx / h, dy / h]);
        }
        let segs: Vec<(P2, P2)> = (0..n_segments)
            .map(|k| {
                let (a, b) = (points[k], points[(k + 1) % n_segments]);
                ([a[0], a[1]], [b[0], b[1]])
            })
            .collect();
        let mean_len = total / n_segments as f64;
        let index = SegmentGrid::new(&segs, (4.0 * mean_len).max(2.0));
        Ok(RiverSpline {
            control_points: control_points.to_vec(),
            half_widths: half_widths.to_vec(),
            points,
            point_half_widths,
            tangents,
            lengths,
            index,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.points.len()
    }

    pub fn segment(&self, k: usize) -> (P2, P2) {
        let n = self.points.len();
        let (a, b) = (self.points[k], self.points[(k + 1) % n]);
        ([a[0], a[1]], [b[0], b[1]])
    }

    pub fn total_length(&self) -> f64 {
        self.lengths.iter().sum()
    }

    pub fn max_half_width(&self) -> f64 {
        self.point_half_widths.iter().cloned().fold(0.0, f64::max)
    }

    /// River half-width at parameter `t` along segment `k`.
    pub fn half_width_at(&self, k: usize, t: f64) -> f64 {
        let n = self.points.len();
        let (w0, w1) = (self.point_half_widths[k], self.point_half_widths[(k + 1) % n]);
        w0 + t * (w1 - w0)
    }

    /// Nearest segment to `p` on the horizontal plane; ties go to the lower index.
    pub fn project(&self, p: P2) -> Projection {
        self.index
            .nearest(p, f64::INFINITY, |k| self.segment(k))
            .expect("unbounded search always finds a segment")
    }

    /// Whether `p` lies on the river surface: within the local half-width of the
    /// nearest centerline point.
    pub fn contains(&self, p: P2) -> bool {
        match self.index.nearest(p, self.max_half_width(), |k| self.segment(k)) {
            Some(pr) => pr.distance <= self.half_width_at(pr.segment, pr.t),
            None => false,
        }
    }
}

/// Cumulative chord length over a dense sampling of the closed spline.
/// Returns (global parameter `u = segment + t`, cumulative length) pairs.
fn arc_length_table(points: &[P3]) -> Result<(Vec<f64>, Vec<f64>), SplineError> {
    let n = points.len();
    let total_samples = n * SAMPLES_PER_SEGMENT;
    let mut params = Vec::with_capacity(total_samples + 1);
    let mut cumulative = Vec::with_capacity(total_samples + 1);
    let mut prev = eval_catmull_rom(points, 0, 0.0)?;
    params.push(0.0);
    cumulative.push(0.0);
    let mut acc = 0.0;
    for i in 1..=total_samples {
        let u = i as f64 / SAMPLES_PER_SEGMENT as f64;
        let seg = (i - 1) / SAMPLES_PER_SEGMENT;
        let t = u - seg as f64;
        let p = eval_catmull_rom(points, seg, t)?;
        acc += dist3(prev, p);
        prev = p;
        params.push(u);
        cumulative.push(acc);
    }
    Ok((params, cumulative))
}

/// Uniform bucket grid over segment bounding boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegmentGrid {
    origin: P2,
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
    n_segments: usize,
}

impl SegmentGrid {
    fn new(segs: &[(P2, P2)], cell: f64) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for (a, b) in segs {
            for p in [a, b] {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        let cols = (((hi[0] - lo[0]) / cell).floor() as usize) + 1;
        let rows = (((hi[1] - lo[1]) / cell).floor() as usize) + 1;
        let mut grid = SegmentGrid { origin: lo, cell, cols, rows, buckets: vec![Vec::new(); cols * rows], n_segments: segs.len() };
        for (k, (a, b)) in segs.iter().enumerate() {
            let (c0, r0) = grid.bucket_of([a[0].min(b[0]), a[1].min(b[1])]);
            let (c1, r1) = grid.bucket_of([a[0].max(b[0]), a[1].max(b[1])]);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    grid.buckets[r * cols + c].push(k as u32);
                }
            }
        }
        grid
    }

    fn bucket_of(&self, p: P2) -> (usize, usize) {
        let c = ((p[0] - self.origin[0]) / self.cell).floor().clamp(0.0, (self.cols - 1) as f64);
        let r = ((p[1] - self.origin[1]) / self.cell).floor().clamp(0.0, (self.rows - 1) as f64);
        (c as usize, r as usize)
    }

    fn inside(&self, p: P2) -> bool {
        let x = (p[0] - self.origin[0]) / self.cell;
        let y = (p[1] - self.origin[1]) / self.cell;
        x >= 0.0 && y >= 0.0 && x < self.cols as f64 && y < self.rows as f64
    }

    /// Exact nearest segment, searched ring by ring outward from `p`'s bucket.
    /// Returns `None` only when nothing lies within `radius`.
    fn nearest(&self, p: P2, radius: f64, seg: impl Fn(usize) -> (P2, P2)) -> Option<Projection> {
        let consider = |k: usize, best: &mut Option<Projection>| {
            let (a, b) = seg(k);
            let (d, t) = point_segment_distance(p, a, b);
            let better = match best {
                None => true,
                Some(bp) => d < bp.distance || (d == bp.distance && k < bp.segment),
            };
            if better {
                *best = Some(Projection { segment: k, distance: d, t });
            }
        };
        let mut best: Option<Projection> = None;
        if !self.inside(p) {
            for k in 0..self.n_segments {
                consider(k, &mut best);
            }
            return best.filter(|b| b.distance <= radius || radius.is_infinite());
        }
        let (pc, pr) = self.bucket_of(p);
        let max_ring = self.cols.max(self.rows);
        for ring in 0..=max_ring {
            if ring > 0 {
                // Everything outside rings 0..ring is at least this far away.
                let bound = (ring - 1) as f64 * self.cell;
                if let Some(b) = best {
                    if b.distance < bound {
                        return Some(b);
                    }
                } else if bound > radius {
                    return None;
                }
            }
            let (r_lo, r_hi) = (pr as isize - ring as isize, pr as isize + ring as isize);
            let (c_lo, c_hi) = (pc as isize - ring as isize, pc as isize + ring as isize);
            for r in r_lo..=r_hi {
                if r < 0 || r >= self.rows as isize {
                    continue;
                }
                let on_edge_row = r == r_lo || r == r_hi;
                let mut c = c_lo;
                while c <= c_hi {
                    if c >= 0 && c < self.cols as isize {
                        for &k in &self.buckets[r as usize * self.cols + c as usize] {
                            consider(k as usize, &mut best);
                        }
                    }
                    c += if on_edge_row || c == c_hi { 1 } else { c_hi - c_lo };
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn ring(n: usize, r: f64) -> Vec<P3> {
        (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                [r * a.cos(), r * a.sin(), 0.0]
            })
            .collect()
    }

    /// Hermite-form evaluation with Catmull-Rom tangents, written independently
    /// of the power-basis form in `eval_catmull_rom`.
    fn hermite_oracle(p: [P3; 4], t: f64) -> P3 {
        let h00 = 2.0 * t.powi(3) - 3.0 * t.powi(2) + 1.0;
        let h10 = t.powi(3) - 2.0 * t.powi(2) + t;
        let h01 = -2.0 * t.powi(3) + 3.0 * t.powi(2);
        let h11 = t.powi(3) - t.powi(2);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let m1 = (p[2][k] - p[0][k]) / 2.0;
            let m2 = (p[3][k] - p[1][k]) / 2.0;
            out[k] = h00 * p[1][k] + h10 * m1 + h01 * p[2][k] + h11 * m2;
        }
        out
    }

    #[test]
    fn too_few_points() {
        let pts = ring(3, 1.0);
        assert_eq!(eval_catmull_rom(&pts, 0, 0.5), Err(SplineError::TooFewPoints(3)));
    }

    #[test]
    fn interpolates_control_points() {
        let pts = ring(7, 3.0);
        for i in 0..7 {
            assert_eq!(eval_catmull_rom(&pts, i, 0.0).unwrap(), pts[i]);
        }
    }

    #[test]
    fn collinear_points_stay_on_the_line() {
        let pts: Vec<P3> = (0..6).map(|i| [i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        for seg in 0..6 {
            for k in 0..=10 {
                let q = eval_catmull_rom(&pts, seg, k as f64 / 10.0).unwrap();
                // Distance from q to the line through the origin along (1,2,-1).
                let d = [1.0, 2.0, -1.0];
                let s = (q[0] * d[0] + q[1] * d[1] + q[2] * d[2]) / 6.0;
                let off = ((q[0] - s * d[0]).powi(2) + (q[1] - s * d[1]).powi(2) + (q[2] - s * d[2]).powi(2)).sqrt();
                assert!(off < 1e-9, "seg {seg}: {off}");
            }
        }
    }

    #[test]
    fn square_midpoint_matches_hermite_oracle() {
        let sq: Vec<P3> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];
        for seg in 0..4 {
            let nb = [sq[(seg + 3) % 4], sq[seg], sq[(seg + 1) % 4], sq[(seg + 2) % 4]];
            for t in [0.0, 0.25, 0.5, 0.9] {
                let a = eval_catmull_rom(&sq, seg, t).unwrap();
                let b = hermite_oracle(nb, t);
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
        }
        // Hand value: segment 0 midpoint is (0.5, -0.125).
        let m = eval_catmull_rom(&sq, 0, 0.5).unwrap();
        assert!((m[0] - 0.5).abs() < 1e-15 && (m[1] + 0.125).abs() < 1e-15);
    }

    #[test]
    fn circle_resampling_is_even() {
        let r = 30.0;
        let s = RiverSpline::build(&ring(24, r), &[5.0; 24], 200).unwrap();
        let expect = std::f64::consts::TAU * r / 200.0;
        for &l in &s.lengths {
            assert!((l - expect).abs() / expect < 0.01, "{l} vs {expect}");
        }
        for t in &s.tangents {
            assert!(((t[0] * t[0] + t[1] * t[1]).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn total_length_matches_dense_sampling() {
        let pts: Vec<P3> = (0..12)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 12.0;
                let r = 32.0 + 5.0 * (3.0 * a).sin();
                [r * a.cos(), r * a.sin(), (2.0 * a).cos()]
            })
            .collect();
        let s = RiverSpline::build(&pts, &[5.0; 12], 200).unwrap();
        let mut dense = 0.0;
        let mut prev = eval_catmull_rom(&pts, 0, 0.0).unwrap();
        for seg in 0..12 {
            for k in 1..=5000 {
                let p = eval_catmull_rom(&pts, seg, k as f64 / 5000.0).unwrap();
                dense += dist3(prev, p);
                prev = p;
            }
        }
        assert!((s.total_length() - dense).abs() / dense < 1e-3);
        let mean = s.total_length() / 200.0;
        assert!(s.lengths.iter().all(|l| (l - mean).abs() / mean < 0.01));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let same = vec![[1.0, 1.0, 0.0]; 5];
        assert_eq!(RiverSpline::build(&same, &[1.0; 5], 60).unwrap_err(), SplineError::Degenerate);
        assert_eq!(RiverSpline::build(&ring(8, 5.0), &[1.0; 8], 49).unwrap_err(), SplineError::TooFewSegments(49));
        assert!(matches!(RiverSpline::build(&ring(8, 5.0), &[1.0; 7], 60), Err(SplineError::WidthMismatch { .. })));
    }

    fn brute_force(s: &RiverSpline, p: P2) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..s.n_segments() {
            let (a, b) = s.segment(k);
            let (d, _) = point_segment_distance(p, a, b);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    #[test]
    fn midpoint_projects_onto_its_segment() {
        let s = RiverSpline::build(&ring(12, 30.0), &[5.0; 12], 100).unwrap();
        for k in 0..100 {
            let (a, b) = s.segment(k);
            let m = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
            let pr = s.project(m);
            assert_eq!(pr.segment, k);
            assert!(pr.distance < 1e-12);
        }
    }

    #[test]
    fn shared_endpoint_ties_to_lower_index() {
        let s = RiverSpline::build(&ring(12, 30.0), &[5.0; 12], 100).unwrap();
        for k in 1..100 {
            let p = s.points[k];
            assert_eq!(s.project([p[0], p[1]]).segment, k - 1);
        }
        // The closing vertex is shared by segments N-1 and 0.
        assert_eq!(s.project([s.points[0][0], s.points[0][1]]).segment, 0);
    }

    #[test]
    fn indexed_projection_matches_brute_force() {
        let s = RiverSpline::build(&ring(12, 30.0), &[5.0; 12], 200).unwrap();
        let mut rng = crate::rng::stream(11, "proj");
        for _ in 0..2000 {
            let p = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
            let (k, d) = brute_force(&s, p);
            let pr = s.project(p);
            assert_eq!(pr.segment, k);
            assert_eq!(pr.distance, d);
        }
    }
}
