//! Procedural lane corridors, kinematic agents, identity-free detection
//! streams, tracking-failure corruption and scenario file I/O.
//!
//! All randomness comes from ChaCha8 (a counter-based stream cipher) seeded
//! with the caller's seed; independent sub-streams are selected with
//! `set_stream` so each stage is reproducible on its own:
//!
//! | stream | use                         |
//! |--------|-----------------------------|
//! | 0      | map and agent generation    |
//! | 1      | detection shuffling          |
//! | 2      | corruption                  |

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geom::{normalize_angle, Pose2, RigidTransform2};

pub const SCHEMA: &str = "himap-scenario/1";

const STREAM_GENERATE: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_CORRUPT: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("invalid corruption spec: {0}")]
    InvalidCorruption(String),
    #[error("{source_name}:{line}:{column}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("io error on {path}: {err}")]
    Io { path: String, err: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointAttr {
    Centerline,
    Boundary,
}

impl PointAttr {
    pub const COUNT: usize = 2;
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Through,
    Turn,
}

impl LaneKind {
    pub const COUNT: usize = 2;
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneAttr {
    pub kind: LaneKind,
    pub intersection: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePoint {
    pub x: f64,
    pub y: f64,
    pub attr: PointAttr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolygon {
    pub points: Vec<LanePoint>,
    pub attr: LaneAttr,
}

impl LanePolygon {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.points.len() < 2 {
            return Err(ScenarioError::Invalid(format!("lane with {} points", self.points.len())));
        }
        for w in self.points.windows(2) {
            if !(w[0].x.is_finite() && w[0].y.is_finite() && w[1].x.is_finite() && w[1].y.is_finite()) {
                return Err(ScenarioError::Invalid("non-finite lane point".into()));
            }
            if w[0].x == w[1].x && w[0].y == w[1].y {
                return Err(ScenarioError::Invalid("coincident consecutive lane points".into()));
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y))
            .sum()
    }

    /// Arc-length midpoint with the heading of the segment containing it. A
    /// midpoint within `VERTEX_TOLERANCE` of the length from a vertex takes
    /// the bisector of the two adjacent segments, so rounding cannot flip the
    /// choice under a rigid motion.
    pub fn reference_pose(&self) -> Pose2 {
        const VERTEX_TOLERANCE: f64 = 1e-9;
        let total = self.length();
        let half = total / 2.0;
        let tol = VERTEX_TOLERANCE * total.max(1.0);
        let n = self.points.len();
        let dir = |i: usize| {
            let (a, b) = (&self.points[i], &self.points[i + 1]);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len = dx.hypot(dy);
            if len > 0.0 {
                (dx / len, dy / len)
            } else {
                (0.0, 0.0)
            }
        };
        let mut walked = 0.0;
        for i in 0..n - 1 {
            let (a, b) = (&self.points[i], &self.points[i + 1]);
            let seg = (b.x - a.x).hypot(b.y - a.y);
            let end = walked + seg;
            if (end - half).abs() <= tol && i + 2 < n {
                let (u, v) = (dir(i), dir(i + 1));
                return Pose2::new(b.x, b.y, (u.1 + v.1).atan2(u.0 + v.0));
            }
            if end >= half {
                let f = if seg > 0.0 { (half - walked) / seg } else { 0.0 };
                return Pose2::new(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y), (b.y - a.y).atan2(b.x - a.x));
            }
            walked = end;
        }
        let (a, b) = (&self.points[n - 2], &self.points[n - 1]);
        Pose2::new(b.x, b.y, (b.y - a.y).atan2(b.x - a.x))
    }

    pub fn transformed(&self, g: &RigidTransform2) -> LanePolygon {
        LanePolygon {
            points: self
                .points
                .iter()
                .map(|p| {
                    let (x, y) = g.apply_point(p.x, p.y);
                    LanePoint { x, y, attr: p.attr }
                })
                .collect(),
            attr: self.attr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentCategory {
    Vehicle,
    Pedestrian,
    Bus,
}

impl AgentCategory {
    pub const COUNT: usize = 3;
    pub fn index(self) -> usize {
        self as usize
    }

    fn speed_scale(self) -> f64 {
        match self {
            AgentCategory::Vehicle => 1.0,
            AgentCategory::Bus => 0.8,
            AgentCategory::Pedestrian => 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
    pub category: AgentCategory,
}

impl AgentState {
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.heading)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn transformed(&self, g: &RigidTransform2) -> AgentState {
        let (x, y) = g.apply_point(self.x, self.y);
        let (vx, vy) = g.rotate_vec(self.vx, self.vy);
        AgentState {
            x,
            y,
            vx,
            vy,
            heading: normalize_angle(self.heading + g.rotation),
            category: self.category,
        }
    }
}

/// One frame of detections. Order within `detections` carries no meaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub timestep: i64,
    pub detections: Vec<AgentState>,
}

/// Which ground-truth track produced each detection of each frame (`None` for clutter).
pub type FrameOrigins = Vec<Vec<Option<usize>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: String,
    pub seed: u64,
    pub dt: f64,
    pub t_obs: usize,
    pub t_future: usize,
    pub lanes: Vec<LanePolygon>,
    pub frames: Vec<DetectionFrame>,
    /// Identified states over observation + future; supervision and evaluation only.
    pub gt_tracks: Vec<Vec<AgentState>>,
    /// Evaluation-side provenance of every detection; never handed to the model.
    pub frame_origins: FrameOrigins,
    /// Indices into the current (last) frame's detections.
    pub target_agents: Vec<usize>,
}

impl Scenario {
    pub fn current_step(&self) -> usize {
        self.t_obs - 1
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.schema != SCHEMA {
            return bad(format!("schema `{}` (expected `{SCHEMA}`)", self.schema));
        }
        if self.t_obs == 0 || self.t_future == 0 {
            return bad("t_obs and t_future must be positive".into());
        }
        if self.lanes.is_empty() {
            return bad("no lanes".into());
        }
        for lane in &self.lanes {
            lane.validate()?;
        }
        if self.frames.len() != self.t_obs {
            return bad(format!("{} frames for t_obs {}", self.frames.len(), self.t_obs));
        }
        if self.frame_origins.len() != self.frames.len() {
            return bad("frame_origins length differs from frames".into());
        }
        for (f, o) in self.frames.iter().zip(&self.frame_origins) {
            if f.detections.len() != o.len() {
                return bad(format!("frame {} origin count mismatch", f.timestep));
            }
            if o.iter().flatten().any(|&t| t >= self.gt_tracks.len()) {
                return bad(format!("frame {} refers to an unknown track", f.timestep));
            }
        }
        for (i, tr) in self.gt_tracks.iter().enumerate() {
            if tr.len() != self.t_obs + self.t_future {
                return bad(format!("track {i} has {} states", tr.len()));
            }
        }
        let current = self.frames.last().map_or(0, |f| f.detections.len());
        if let Some(&t) = self.target_agents.iter().find(|&&t| t >= current) {
            return bad(format!("target {t} outside current frame of {current}"));
        }
        Ok(())
    }

    /// Track behind each target agent, when the target is not clutter.
    pub fn target_track(&self, target: usize) -> Option<usize> {
        self.frame_origins.last()?.get(self.target_agents[target]).copied().flatten()
    }

    /// Applies `corrupt` to the detection stream; targets become the
    /// surviving non-clutter detections of the current frame.
    pub fn corrupted(&self, spec: &CorruptionSpec, seed: u64) -> Result<Scenario, ScenarioError> {
        let (frames, origins) = corrupt(&self.frames, &self.frame_origins, spec, seed)?;
        let target_agents = origins
            .last()
            .map(|o| o.iter().enumerate().filter(|(_, t)| t.is_some()).map(|(i, _)| i).collect())
            .unwrap_or_default();
        Ok(Scenario {
            frames,
            frame_origins: origins,
            target_agents,
            ..self.clone()
        })
    }

    /// Same scenario with every position, heading and velocity moved by `g`.
    pub fn transformed(&self, g: &RigidTransform2) -> Scenario {
        Scenario {
            lanes: self.lanes.iter().map(|l| l.transformed(g)).collect(),
            frames: self
                .frames
                .iter()
                .map(|f| DetectionFrame {
                    timestep: f.timestep,
                    detections: f.detections.iter().map(|d| d.transformed(g)).collect(),
                })
                .collect(),
            gt_tracks: self
                .gt_tracks
                .iter()
                .map(|t| t.iter().map(|s| s.transformed(g)).collect())
                .collect(),
            ..self.clone()
        }
    }

    /// Reorders detections inside every frame by `seed`, keeping targets and origins aligned.
    pub fn shuffled(&self, seed: u64) -> Scenario {
        let mut rng = stream_rng(seed, STREAM_SHUFFLE);
        let mut out = self.clone();
        let mut new_targets = self.target_agents.clone();
        let last = self.frames.len() - 1;
        for (fi, (frame, origins)) in out.frames.iter_mut().zip(out.frame_origins.iter_mut()).enumerate() {
            let mut order: Vec<usize> = (0..frame.detections.len()).collect();
            order.shuffle(&mut rng);
            frame.detections = order.iter().map(|&i| self.frames[fi].detections[i]).collect();
            *origins = order.iter().map(|&i| self.frame_origins[fi][i]).collect();
            if fi == last {
                let mut inverse = vec![0; order.len()];
                for (new, &old) in order.iter().enumerate() {
                    inverse[old] = new;
                }
                new_targets = self.target_agents.iter().map(|&t| inverse[t]).collect();
            }
        }
        out.target_agents = new_targets;
        out
    }
}

/// Knobs for [`generate`]. Ranges are inclusive `(min, max)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_agents: (usize, usize),
    pub n_sections: (usize, usize),
    pub n_parallel: (usize, usize),
    pub arc_prob: f64,
    pub fork_prob: f64,
    pub section_length: (f64, f64),
    pub arc_radius: (f64, f64),
    pub arc_angle_deg: (f64, f64),
    pub lane_width: f64,
    pub point_spacing: f64,
    /// Vehicle speed range in m/s; buses and pedestrians are scaled down.
    pub speed_range: (f64, f64),
    pub accel_max: f64,
    pub velocity_noise: f64,
    pub lateral_noise: f64,
    pub min_gap: f64,
    pub t_obs: usize,
    pub t_future: usize,
    pub dt: f64,
    /// Place each scene at a random rigid pose.
    pub random_frame: bool,
    /// Sampling weights for vehicle, pedestrian, bus.
    pub category_weights: [f64; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_agents: (2, 8),
            n_sections: (4, 6),
            n_parallel: (1, 3),
            arc_prob: 0.4,
            fork_prob: 0.5,
            section_length: (20.0, 30.0),
            arc_radius: (40.0, 80.0),
            arc_angle_deg: (15.0, 35.0),
            lane_width: 3.5,
            point_spacing: 2.0,
            speed_range: (2.0, 14.0),
            accel_max: 2.0,
            velocity_noise: 0.2,
            lateral_noise: 0.15,
            min_gap: 5.0,
            t_obs: 10,
            t_future: 12,
            dt: 0.1,
            random_frame: true,
            category_weights: [0.8, 0.05, 0.15],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        let range_ok = |r: (usize, usize)| r.0 >= 1 && r.0 <= r.1;
        let frange_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !range_ok(self.n_agents) {
            return bad("n_agents must satisfy 1 <= min <= max");
        }
        if !range_ok(self.n_sections) || !range_ok(self.n_parallel) {
            return bad("n_sections and n_parallel must satisfy 1 <= min <= max");
        }
        if self.t_obs < 1 || self.t_future < 1 {
            return bad("t_obs and t_future must be at least 1");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !frange_ok(self.section_length) || self.section_length.0 <= 0.0 {
            return bad("section_length must be a positive range");
        }
        if !frange_ok(self.arc_radius) || self.arc_radius.0 <= self.lane_width * self.n_parallel.1 as f64 {
            return bad("arc_radius must exceed the corridor width");
        }
        if !frange_ok(self.arc_angle_deg) || !frange_ok(self.speed_range) || self.speed_range.0 < 0.0 {
            return bad("angle and speed ranges must be ordered and non-negative");
        }
        if !(0.0..=1.0).contains(&self.arc_prob) || !(0.0..=1.0).contains(&self.fork_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.point_spacing <= 0.0 || self.min_gap <= 0.0 || self.lane_width <= 0.0 {
            return bad("spacings must be positive");
        }
        if self.accel_max < 0.0 || self.velocity_noise < 0.0 || self.lateral_noise < 0.0 {
            return bad("noise magnitudes must be non-negative");
        }
        if self.category_weights.iter().any(|w| *w < 0.0) || self.category_weights.iter().sum::<f64>() <= 0.0 {
            return bad("category weights must be non-negative with positive sum");
        }
        Ok(())
    }

    /// Upper bound on `|p[t+1] - p[t] - v[t] dt|` for generated tracks.
    pub fn noise_bound(&self) -> f64 {
        let vmax = self.speed_range.1;
        let chord = (vmax * self.dt).powi(2) / (2.0 * (self.arc_radius.0 - self.lane_width * self.n_parallel.1 as f64));
        0.5 * self.accel_max * self.dt * self.dt
            + 3.0 * self.velocity_noise * self.dt * 2f64.sqrt()
            + 2.0 * self.lateral_noise
            + chord
            + 1e-9
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

fn uniform_usize(rng: &mut ChaCha8Rng, r: (usize, usize)) -> usize {
    rng.random_range(r.0..=r.1)
}

/// Densely sampled centreline with cumulative arc length.
#[derive(Clone, Debug)]
struct Polyline {
    pts: Vec<(f64, f64)>,
    cum: Vec<f64>,
}

impl Polyline {
    fn new(pts: Vec<(f64, f64)>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            acc += (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cum.push(acc);
        }
        Self { pts, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap_or(&0.0)
    }

    fn end_heading(&self) -> f64 {
        let n = self.pts.len();
        let (a, b) = (self.pts[n - 2], self.pts[n - 1]);
        (b.1 - a.1).atan2(b.0 - a.0)
    }

    /// Point and unit tangent at arc length `s` (clamped to the path).
    fn at(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        };
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let f = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let t = ((b.0 - a.0) / seg, (b.1 - a.1) / seg);
        ((a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)), t)
    }

    fn concat(&self, other: &Polyline) -> Polyline {
        let mut pts = self.pts.clone();
        pts.extend(other.pts.iter().skip(1));
        Polyline::new(pts)
    }

    fn extended(&self, length: f64) -> Polyline {
        let h = self.end_heading();
        let (ex, ey) = *self.pts.last().unwrap();
        let mut pts = self.pts.clone();
        pts.push((ex + length * h.cos(), ey + length * h.sin()));
        Polyline::new(pts)
    }

    /// Resamples to roughly `spacing`, keeping both endpoints.
    fn lane(&self, spacing: f64, attr: LaneAttr) -> LanePolygon {
        let n = ((self.length() / spacing).round() as usize).max(1);
        let points = (0..=n)
            .map(|k| {
                let ((x, y), _) = self.at(self.length() * k as f64 / n as f64);
                let attr = if k == 0 || k == n { PointAttr::Boundary } else { PointAttr::Centerline };
                LanePoint { x, y, attr }
            })
            .collect();
        LanePolygon { points, attr }
    }
}

const DENSE_STEP: f64 = 0.25;

/// Reference line of one section starting at `start` pose, plus per-lane offset copies.
fn section_paths(start: Pose2, length: f64, curvature: f64, offsets: &[f64]) -> Vec<Polyline> {
    let n = ((length / DENSE_STEP).ceil() as usize).max(2);
    offsets
        .iter()
        .map(|&off| {
            let pts = (0..=n)
                .map(|k| {
                    let s = length * k as f64 / n as f64;
                    let (lx, ly, h) = if curvature.abs() < 1e-12 {
                        (s, 0.0, 0.0)
                    } else {
                        let th = s * curvature;
                        (th.sin() / curvature, (1.0 - th.cos()) / curvature, th)
                    };
                    // shift to the left of the reference line
                    let (ox, oy) = (-h.sin() * off, h.cos() * off);
                    start.to_world(lx + ox, ly + oy)
                })
                .collect();
            Polyline::new(pts)
        })
        .collect()
}

fn end_pose(start: Pose2, length: f64, curvature: f64) -> Pose2 {
    let (lx, ly, h) = if curvature.abs() < 1e-12 {
        (length, 0.0, 0.0)
    } else {
        let th = length * curvature;
        (th.sin() / curvature, (1.0 - th.cos()) / curvature, th)
    };
    let (x, y) = start.to_world(lx, ly);
    Pose2::new(x, y, start.heading + h)
}

struct Map {
    lanes: Vec<LanePolygon>,
    /// Full corridor centreline per parallel lane.
    corridors: Vec<Polyline>,
    /// Branch paths continuing parallel lane 0.
    branches: Vec<Polyline>,
}

fn build_map(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Map {
    let n_sections = uniform_usize(rng, cfg.n_sections);
    let n_parallel = uniform_usize(rng, cfg.n_parallel);
    let offsets: Vec<f64> = (0..n_parallel).map(|p| p as f64 * cfg.lane_width).collect();
    let mut pose = Pose2::new(0.0, 0.0, 0.0);
    let mut lanes = Vec::new();
    let mut corridors: Vec<Option<Polyline>> = vec![None; n_parallel];
    for _ in 0..n_sections {
        let arc = rng.random_bool(cfg.arc_prob);
        let (length, curvature, kind) = if arc {
            let radius = uniform(rng, cfg.arc_radius);
            let angle = uniform(rng, cfg.arc_angle_deg).to_radians();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (radius * angle, sign / radius, LaneKind::Turn)
        } else {
            (uniform(rng, cfg.section_length), 0.0, LaneKind::Through)
        };
        let paths = section_paths(pose, length, curvature, &offsets);
        for (p, path) in paths.into_iter().enumerate() {
            lanes.push(path.lane(cfg.point_spacing, LaneAttr { kind, intersection: false }));
            corridors[p] = Some(match corridors[p].take() {
                Some(c) => c.concat(&path),
                None => path,
            });
        }
        pose = end_pose(pose, length, curvature);
    }
    let corridors: Vec<Polyline> = corridors.into_iter().map(|c| c.expect("at least one section")).collect();
    let mut branches = Vec::new();
    if rng.random_bool(cfg.fork_prob) {
        let length = uniform(rng, cfg.section_length);
        let radius = uniform(rng, cfg.arc_radius) * 0.6;
        let straight = section_paths(pose, length, 0.0, &[0.0]).remove(0);
        let turn = section_paths(pose, length, -1.0 / radius, &[0.0]).remove(0);
        lanes.push(straight.lane(cfg.point_spacing, LaneAttr { kind: LaneKind::Through, intersection: true }));
        lanes.push(turn.lane(cfg.point_spacing, LaneAttr { kind: LaneKind::Turn, intersection: true }));
        branches = vec![straight, turn];
    }
    Map { lanes, corridors, branches }
}

fn sample_category(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> AgentCategory {
    let total: f64 = cfg.category_weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in cfg.category_weights.iter().enumerate() {
        if u < *w {
            return [AgentCategory::Vehicle, AgentCategory::Pedestrian, AgentCategory::Bus][i];
        }
        u -= w;
    }
    AgentCategory::Vehicle
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    n.sample(rng).clamp(-3.0 * sigma, 3.0 * sigma)
}

/// Generates a scenario as a pure function of `cfg` and `seed`.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<Scenario, ScenarioError> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, STREAM_GENERATE);
    let map = build_map(cfg, &mut rng);
    let n_agents = uniform_usize(&mut rng, cfg.n_agents);

    // spawn along each corridor in distinct slots of width >= min_gap
    let spawn_len = map.corridors[0].length();
    let slots_per_lane = ((spawn_len / cfg.min_gap).floor() as usize).max(1);
    let slot_w = spawn_len / slots_per_lane as f64;
    let capacity = slots_per_lane * map.corridors.len();
    if n_agents > capacity {
        return Err(ScenarioError::Infeasible(format!(
            "{n_agents} agents exceed lane capacity {capacity}"
        )));
    }
    let mut slots: Vec<usize> = (0..capacity).collect();
    slots.shuffle(&mut rng);
    let spawns: Vec<(usize, f64)> = slots[..n_agents]
        .iter()
        .map(|&k| {
            let slack = (slot_w - cfg.min_gap).max(0.0);
            let u = if slack > 0.0 { rng.random_range(0.0..slack) } else { 0.0 };
            (k / slots_per_lane, (k % slots_per_lane) as f64 * slot_w + u)
        })
        .collect();

    let total_steps = cfg.t_obs + cfg.t_future;
    let horizon = cfg.speed_range.1 * cfg.dt * total_steps as f64 + 10.0;
    let mut gt_tracks = Vec::with_capacity(n_agents);
    for &(lane, s0) in &spawns {
        let mut path = map.corridors[lane].clone();
        if lane == 0 && !map.branches.is_empty() {
            let b = rng.random_range(0..map.branches.len());
            path = path.concat(&map.branches[b]);
        }
        let path = path.extended(horizon);
        let category = sample_category(cfg, &mut rng);
        let scale = category.speed_scale();
        let vmax = cfg.speed_range.1 * scale;
        let mut v = uniform(&mut rng, cfg.speed_range) * scale;
        let accel = if cfg.accel_max > 0.0 {
            rng.random_range(-cfg.accel_max..=cfg.accel_max) * scale
        } else {
            0.0
        };
        let mut s = s0;
        let mut lateral = truncated_normal(&mut rng, cfg.lateral_noise / 3.0);
        let mut states = Vec::with_capacity(total_steps);
        for _ in 0..total_steps {
            let ((px, py), (tx, ty)) = path.at(s);
            let (nx, ny) = (-ty, tx);
            let nvx = truncated_normal(&mut rng, cfg.velocity_noise);
            let nvy = truncated_normal(&mut rng, cfg.velocity_noise);
            states.push(AgentState {
                x: px + nx * lateral,
                y: py + ny * lateral,
                vx: tx * v + nvx,
                vy: ty * v + nvy,
                heading: normalize_angle(ty.atan2(tx)),
                category,
            });
            let v_next = (v + accel * cfg.dt).clamp(0.0, vmax);
            s += 0.5 * (v + v_next) * cfg.dt;
            v = v_next;
            let step = truncated_normal(&mut rng, cfg.lateral_noise / 6.0);
            lateral = (0.8 * lateral + step).clamp(-cfg.lateral_noise, cfg.lateral_noise);
        }
        gt_tracks.push(states);
    }

    let mut lanes = map.lanes;
    if cfg.random_frame {
        let g = RigidTransform2::new(
            rng.random_range(-PI..PI),
            (rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)),
        );
        lanes = lanes.iter().map(|l| l.transformed(&g)).collect();
        for tr in &mut gt_tracks {
            for st in tr.iter_mut() {
                *st = st.transformed(&g);
            }
        }
    }

    let (frames, frame_origins) = strip_ids_with_origins(&gt_tracks, cfg.t_obs, seed);
    let target_agents = (0..frames.last().map_or(0, |f| f.detections.len())).collect();
    let scenario = Scenario {
        schema: SCHEMA.to_string(),
        seed,
        dt: cfg.dt,
        t_obs: cfg.t_obs,
        t_future: cfg.t_future,
        lanes,
        frames,
        gt_tracks,
        frame_origins,
        target_agents,
    };
    Ok(scenario)
}

fn strip_ids_with_origins(tracks: &[Vec<AgentState>], t_obs: usize, seed: u64) -> (Vec<DetectionFrame>, FrameOrigins) {
    let mut rng = stream_rng(seed, STREAM_SHUFFLE);
    let mut frames = Vec::with_capacity(t_obs);
    let mut origins = Vec::with_capacity(t_obs);
    for t in 0..t_obs {
        let mut order: Vec<usize> = (0..tracks.len()).collect();
        order.shuffle(&mut rng);
        frames.push(DetectionFrame {
            timestep: t as i64,
            detections: order.iter().map(|&i| tracks[i][t]).collect(),
        });
        origins.push(order.into_iter().map(Some).collect());
    }
    (frames, origins)
}

/// Identity-free detection frames over the observation window, shuffled by `seed`.
pub fn strip_ids(s: &Scenario, seed: u64) -> Vec<DetectionFrame> {
    strip_ids_with_origins(&s.gt_tracks, s.t_obs, seed).0
}

/// Tracking-failure model applied to a detection stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub drop_prob: f64,
    pub jitter_sigma: f64,
    /// (track id, first step, last step), inclusive.
    pub occlusion: Vec<(usize, i64, i64)>,
    pub clutter_rate: f64,
}

impl CorruptionSpec {
    pub fn validate(&self, n_frames: usize) -> Result<(), ScenarioError> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(ScenarioError::InvalidCorruption(format!("drop_prob {}", self.drop_prob)));
        }
        if !(self.jitter_sigma >= 0.0) || !(self.clutter_rate >= 0.0) {
            return Err(ScenarioError::InvalidCorruption("negative jitter or clutter rate".into()));
        }
        for &(_, a, b) in &self.occlusion {
            if a < 0 || b < a || b >= n_frames as i64 {
                return Err(ScenarioError::InvalidCorruption(format!(
                    "occlusion window {a}..={b} outside 0..{n_frames}"
                )));
            }
        }
        Ok(())
    }
}

/// Drops, jitters, occludes and clutters detections. Returns new frames and
/// their provenance; inputs are untouched.
pub fn corrupt(
    frames: &[DetectionFrame],
    origins: &[Vec<Option<usize>>],
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<(Vec<DetectionFrame>, FrameOrigins), ScenarioError> {
    spec.validate(frames.len())?;
    let mut rng = stream_rng(seed, STREAM_CORRUPT);
    let jitter = if spec.jitter_sigma > 0.0 {
        Some(Normal::new(0.0, spec.jitter_sigma).expect("valid sigma"))
    } else {
        None
    };
    let clutter = if spec.clutter_rate > 0.0 {
        Some(Poisson::new(spec.clutter_rate).expect("valid rate"))
    } else {
        None
    };
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for d in frames.iter().flat_map(|f| &f.detections) {
        lo = (lo.0.min(d.x), lo.1.min(d.y));
        hi = (hi.0.max(d.x), hi.1.max(d.y));
    }
    let (lo, hi) = ((lo.0 - 10.0, lo.1 - 10.0), (hi.0 + 10.0, hi.1 + 10.0));

    let mut out_frames = Vec::with_capacity(frames.len());
    let mut out_origins = Vec::with_capacity(frames.len());
    for (fi, frame) in frames.iter().enumerate() {
        let mut dets = Vec::new();
        let mut orig = Vec::new();
        for (di, det) in frame.detections.iter().enumerate() {
            let origin = origins.get(fi).and_then(|o| o.get(di)).copied().flatten();
            let dropped = rng.random::<f64>() < spec.drop_prob;
            let occluded = origin.is_some_and(|id| {
                spec.occlusion
                    .iter()
                    .any(|&(a, s, e)| a == id && (s..=e).contains(&frame.timestep))
            });
            if dropped || occluded {
                continue;
            }
            let mut d = *det;
            if let Some(n) = &jitter {
                d.x += n.sample(&mut rng);
                d.y += n.sample(&mut rng);
            }
            dets.push(d);
            orig.push(origin);
        }
        if let Some(p) = &clutter {
            let count = p.sample(&mut rng) as usize;
            for _ in 0..count {
                if !(lo.0 < hi.0 && lo.1 < hi.1) {
                    break;
                }
                let heading = rng.random_range(-PI..PI);
                let speed = rng.random_range(0.0..10.0);
                dets.push(AgentState {
                    x: rng.random_range(lo.0..hi.0),
                    y: rng.random_range(lo.1..hi.1),
                    vx: speed * heading.cos(),
                    vy: speed * heading.sin(),
                    heading: normalize_angle(heading),
                    category: AgentCategory::Vehicle,
                });
                orig.push(None);
            }
        }
        out_frames.push(DetectionFrame {
            timestep: frame.timestep,
            detections: dets,
        });
        out_origins.push(orig);
    }
    Ok((out_frames, out_origins))
}

fn parse_error(source_name: &str, e: serde_json::Error) -> ScenarioError {
    ScenarioError::Parse {
        source_name: source_name.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

pub fn to_json(s: &Scenario) -> String {
    serde_json::to_string_pretty(s).expect("scenario serializes")
}

pub fn from_json(text: &str, source_name: &str) -> Result<Scenario, ScenarioError> {
    let s: Scenario = serde_json::from_str(text).map_err(|e| parse_error(source_name, e))?;
    s.validate()?;
    Ok(s)
}

pub fn write(s: &Scenario, path: &Path) -> Result<(), ScenarioError> {
    let io = |err| ScenarioError::Io {
        path: path.display().to_string(),
        err,
    };
    fs::write(path, to_json(s) + "\n").map_err(io)
}

pub fn read(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|err| ScenarioError::Io {
        path: path.display().to_string(),
        err,
    })?;
    from_json(&text, &path.display().to_string())
}

/// Writes one compact scenario document per line.
pub fn write_corpus(scenarios: &[Scenario], path: &Path) -> Result<(), ScenarioError> {
    let io = |err| ScenarioError::Io {
        path: path.display().to_string(),
        err,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for s in scenarios {
        let line = serde_json::to_string(s).expect("scenario serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    let io = |err| ScenarioError::Io {
        path: path.display().to_string(),
        err,
    };
    let f = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scenario = serde_json::from_str(&line).map_err(|e| ScenarioError::Parse {
            source_name: path.display().to_string(),
            line: i + 1,
            column: e.column(),
            msg: e.to_string(),
        })?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Loads a corpus from a `.ndjson` file, a single `.json` scenario, or a
/// directory of either (read in file-name order).
pub fn load_corpus(path: &Path) -> Result<Vec<Scenario>, ScenarioError> {
    if path.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)
            .map_err(|err| ScenarioError::Io {
                path: path.display().to_string(),
                err,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ndjson" | "json")))
            .filter(|p| p.file_name().and_then(|n| n.to_str()) != Some("manifest.json"))
            .collect();
        entries.sort();
        let mut out = Vec::new();
        for p in entries {
            out.extend(load_corpus(&p)?);
        }
        Ok(out)
    } else if path.extension().and_then(|e| e.to_str()) == Some("json") {
        Ok(vec![read(path)?])
    } else {
        read_corpus(path)
    }
}

/// Generates `count` scenarios with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_corpus(cfg: &GeneratorConfig, base_seed: u64, count: usize) -> Result<Vec<Scenario>, ScenarioError> {
    let seeds: Vec<u64> = (0..count as u64).map(|i| base_seed.wrapping_add(i)).collect();
    crate::par::map(&seeds, |&s| generate(cfg, s)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_lane_cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_agents: (1, 1),
            n_sections: (1, 1),
            n_parallel: (1, 1),
            arc_prob: 0.0,
            fork_prob: 0.0,
            accel_max: 0.0,
            velocity_noise: 0.0,
            lateral_noise: 0.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = GeneratorConfig::default();
        let a = to_json(&generate(&cfg, 42).unwrap());
        let b = to_json(&generate(&cfg, 42).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, to_json(&generate(&cfg, 43).unwrap()));
    }

    #[test]
    fn constant_velocity_is_equally_spaced() {
        let s = generate(&single_lane_cfg(), 5).unwrap();
        let track = &s.gt_tracks[0];
        let steps: Vec<f64> = track.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).collect();
        for d in &steps {
            assert!((d - steps[0]).abs() < 1e-9, "{steps:?}");
        }
    }

    #[test]
    fn defaults_respect_ranges_and_kinematics() {
        let cfg = GeneratorConfig::default();
        let bound = cfg.noise_bound();
        for seed in 0..60 {
            let s = generate(&cfg, seed).unwrap();
            s.validate().unwrap();
            assert!((4..=20).contains(&s.lanes.len()), "{} lanes", s.lanes.len());
            assert!((2..=8).contains(&s.gt_tracks.len()));
            for tr in &s.gt_tracks {
                for w in tr.windows(2) {
                    let ex = w[1].x - w[0].x - w[0].vx * cfg.dt;
                    let ey = w[1].y - w[0].y - w[0].vy * cfg.dt;
                    assert!(ex.hypot(ey) <= bound, "seed {seed}: {} > {bound}", ex.hypot(ey));
                }
            }
            assert_eq!(s.target_agents.len(), s.gt_tracks.len());
        }
    }

    #[test]
    fn too_many_agents_rejected() {
        let cfg = GeneratorConfig {
            n_agents: (100, 100),
            ..single_lane_cfg()
        };
        assert!(matches!(generate(&cfg, 1), Err(ScenarioError::Infeasible(_))));
        let cfg = GeneratorConfig {
            n_agents: (0, 2),
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(ScenarioError::InvalidConfig(_))));
    }

    #[test]
    fn strip_ids_single_agent_and_multiset() {
        let s = generate(&single_lane_cfg(), 9).unwrap();
        for (t, f) in strip_ids(&s, 1).iter().enumerate() {
            assert_eq!(f.detections, vec![s.gt_tracks[0][t]]);
        }
        let multi = generate(&GeneratorConfig::default(), 3).unwrap();
        let (a, b) = (strip_ids(&multi, 1), strip_ids(&multi, 2));
        let key = |d: &AgentState| (d.x.to_bits(), d.y.to_bits());
        for (fa, fb) in a.iter().zip(&b) {
            let mut ka: Vec<_> = fa.detections.iter().map(key).collect();
            let mut kb: Vec<_> = fb.detections.iter().map(key).collect();
            ka.sort();
            kb.sort();
            assert_eq!(ka, kb);
        }
    }

    #[test]
    fn corruption_identity_and_total_drop() {
        let s = generate(&GeneratorConfig::default(), 11).unwrap();
        let (f, o) = corrupt(&s.frames, &s.frame_origins, &CorruptionSpec::default(), 3).unwrap();
        assert_eq!(f, s.frames);
        assert_eq!(o, s.frame_origins);
        let spec = CorruptionSpec {
            drop_prob: 1.0,
            ..Default::default()
        };
        let (f, _) = corrupt(&s.frames, &s.frame_origins, &spec, 3).unwrap();
        assert!(f.iter().all(|fr| fr.detections.is_empty()));
    }

    #[test]
    fn drop_rate_matches_probability() {
        let frame = DetectionFrame {
            timestep: 0,
            detections: vec![
                AgentState { x: 0.0, y: 0.0, vx: 1.0, vy: 0.0, heading: 0.0, category: AgentCategory::Vehicle };
                1000
            ],
        };
        let frames = vec![frame; 10];
        let origins: FrameOrigins = vec![(0..1000).map(Some).collect(); 10];
        let spec = CorruptionSpec {
            drop_prob: 0.3,
            ..Default::default()
        };
        let (out, _) = corrupt(&frames, &origins, &spec, 17).unwrap();
        let kept: usize = out.iter().map(|f| f.detections.len()).sum();
        let rate = 1.0 - kept as f64 / 10_000.0;
        assert!((rate - 0.3).abs() < 0.02, "drop rate {rate}");
    }

    #[test]
    fn occlusion_clutter_and_jitter() {
        let s = generate(&GeneratorConfig::default(), 21).unwrap();
        let spec = CorruptionSpec {
            occlusion: vec![(0, 2, 5)],
            clutter_rate: 2.0,
            jitter_sigma: 0.5,
            ..Default::default()
        };
        let before = s.clone();
        let c = s.corrupted(&spec, 4).unwrap();
        assert_eq!(s, before, "inputs untouched");
        assert_eq!(c.gt_tracks, s.gt_tracks);
        for (t, o) in c.frame_origins.iter().enumerate() {
            let has0 = o.contains(&Some(0));
            assert_eq!(has0, !(2..=5).contains(&t), "frame {t}");
        }
        let clutter: usize = c.frame_origins.iter().flatten().filter(|o| o.is_none()).count();
        assert!(clutter > 0);
        for &t in &c.target_agents {
            assert!(c.frame_origins.last().unwrap()[t].is_some());
        }
        let bad = CorruptionSpec {
            occlusion: vec![(0, 3, 40)],
            ..Default::default()
        };
        assert!(s.corrupted(&bad, 0).is_err());
    }

    #[test]
    fn json_round_trip_and_missing_key() {
        let s = generate(&GeneratorConfig::default(), 77).unwrap();
        let back = from_json(&to_json(&s), "mem").unwrap();
        assert_eq!(back, s);
        let mut v: serde_json::Value = serde_json::from_str(&to_json(&s)).unwrap();
        v.as_object_mut().unwrap().remove("lanes");
        let err = from_json(&serde_json::to_string_pretty(&v).unwrap(), "mem").unwrap_err();
        assert!(err.to_string().contains("`lanes`"), "{err}");
        assert!(matches!(err, ScenarioError::Parse { line, .. } if line > 0));
    }

    #[test]
    fn reference_pose_is_arc_midpoint() {
        let lane = LanePolygon {
            points: vec![
                LanePoint { x: 0.0, y: 0.0, attr: PointAttr::Boundary },
                LanePoint { x: 4.0, y: 0.0, attr: PointAttr::Centerline },
                LanePoint { x: 4.0, y: 2.0, attr: PointAttr::Boundary },
            ],
            attr: LaneAttr { kind: LaneKind::Turn, intersection: false },
        };
        let p = lane.reference_pose();
        assert!((p.x - 3.0).abs() < 1e-12 && p.y.abs() < 1e-12 && p.heading.abs() < 1e-12);

        // midpoint on the corner vertex: bisector of the two segments
        let mut corner = lane.clone();
        corner.points[2].y = 4.0;
        let p = corner.reference_pose();
        assert!((p.x - 4.0).abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((p.heading - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn shuffled_keeps_targets_aligned() {
        let s = generate(&GeneratorConfig::default(), 8).unwrap();
        let sh = s.shuffled(99);
        for (i, _) in s.target_agents.iter().enumerate() {
            assert_eq!(s.target_track(i), sh.target_track(i));
            let a = s.frames.last().unwrap().detections[s.target_agents[i]];
            let b = sh.frames.last().unwrap().detections[sh.target_agents[i]];
            assert_eq!(a, b);
        }
    }
}
