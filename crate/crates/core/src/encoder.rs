//! Rigid-motion invariant embeddings of lanes and detections.
//!
//! Lane points enter through their coordinates in the lane's reference frame
//! (arc-length midpoint, heading of the segment containing it); detections
//! enter only through speed, velocity/heading misalignment and category.
//! Absolute poses never reach an embedding.

use crate::diffcore::{Graph, NdArray, NodeId, ParamId, ParamStore};
use crate::geom::{fourier_features, normalize_angle, FourierSpec, Pose2};
use crate::nn::{stack_rows, Builder, GatedAttention, Linear, Mlp, NnResult, ResidualFfn};
use crate::scenario::{AgentCategory, AgentState, LaneKind, LanePolygon, PointAttr, ScenarioError};

const COORD_SPEC: FourierSpec = FourierSpec {
    num_frequencies: 5,
    base_frequency: 1.0 / 64.0,
    include_raw: false,
};
const ARC_SPEC: FourierSpec = FourierSpec {
    num_frequencies: 2,
    base_frequency: 0.5,
    include_raw: true,
};
const SPEED_SPEC: FourierSpec = FourierSpec {
    num_frequencies: 4,
    base_frequency: 1.0 / 32.0,
    include_raw: false,
};
const ANGLE_SPEC: FourierSpec = FourierSpec {
    num_frequencies: 2,
    base_frequency: 1.0 / (2.0 * std::f64::consts::PI),
    include_raw: true,
};
const SPEED_RAW_SCALE: f64 = 0.1;
const CATEGORY_DIM: usize = 8;

pub const LANE_POINT_FEATURES: usize = 2 * 10 + 5 + PointAttr::COUNT;
pub const LANE_ATTR_FEATURES: usize = LaneKind::COUNT + 1;
pub const AGENT_FEATURES: usize = 8 + 1 + 5;

/// Point tokens of one lane, in its reference frame, in polyline order.
pub fn lane_point_features(lane: &LanePolygon) -> Vec<Vec<f64>> {
    let frame = lane.reference_pose();
    let total = lane.length();
    let mut walked = 0.0;
    let mut out = Vec::with_capacity(lane.points.len());
    for (i, pt) in lane.points.iter().enumerate() {
        if i > 0 {
            let prev = &lane.points[i - 1];
            walked += (pt.x - prev.x).hypot(pt.y - prev.y);
        }
        let (lx, ly) = frame.to_local(pt.x, pt.y);
        let mut f = Vec::with_capacity(LANE_POINT_FEATURES);
        fourier_features(lx, &COORD_SPEC, &mut f);
        fourier_features(ly, &COORD_SPEC, &mut f);
        fourier_features(walked / total, &ARC_SPEC, &mut f);
        let mut attr = [0.0; PointAttr::COUNT];
        attr[pt.attr.index()] = 1.0;
        f.extend_from_slice(&attr);
        out.push(f);
    }
    out
}

pub fn lane_attr_features(lane: &LanePolygon) -> Vec<f64> {
    let mut f = vec![0.0; LANE_ATTR_FEATURES];
    f[lane.attr.kind.index()] = 1.0;
    f[LaneKind::COUNT] = if lane.attr.intersection { 1.0 } else { 0.0 };
    f
}

/// Angle between velocity direction and heading; 0 for a stationary agent.
pub fn misalignment(s: &AgentState) -> f64 {
    if s.vx == 0.0 && s.vy == 0.0 {
        0.0
    } else {
        normalize_angle(s.vy.atan2(s.vx) - s.heading)
    }
}

pub fn agent_features(s: &AgentState) -> Vec<f64> {
    let speed = s.speed();
    let mut f = Vec::with_capacity(AGENT_FEATURES);
    fourier_features(speed, &SPEED_SPEC, &mut f);
    f.push(speed * SPEED_RAW_SCALE);
    fourier_features(misalignment(s), &ANGLE_SPEC, &mut f);
    f
}

/// Constant inputs for encoding a set of lanes in one batch.
#[derive(Clone, Debug)]
pub struct LaneBatch {
    pub point_features: NdArray,
    /// (lane, point row) pairs.
    pub links: Vec<(usize, usize)>,
    pub kinds: Vec<usize>,
    pub attrs: NdArray,
    pub poses: Vec<Pose2>,
}

impl LaneBatch {
    pub fn new(lanes: &[LanePolygon]) -> Result<Self, ScenarioError> {
        let mut rows = Vec::new();
        let mut links = Vec::new();
        for (j, lane) in lanes.iter().enumerate() {
            lane.validate()?;
            for f in lane_point_features(lane) {
                links.push((j, rows.len()));
                rows.push(f);
            }
        }
        Ok(Self {
            point_features: stack_rows(&rows, LANE_POINT_FEATURES),
            links,
            kinds: lanes.iter().map(|l| l.attr.kind.index()).collect(),
            attrs: stack_rows(&lanes.iter().map(lane_attr_features).collect::<Vec<_>>(), LANE_ATTR_FEATURES),
            poses: lanes.iter().map(|l| l.reference_pose()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Constant inputs for encoding a set of detections in one batch.
#[derive(Clone, Debug)]
pub struct AgentBatch {
    pub features: NdArray,
    pub categories: Vec<usize>,
}

impl AgentBatch {
    pub fn new(states: &[AgentState]) -> Self {
        Self {
            features: stack_rows(&states.iter().map(agent_features).collect::<Vec<_>>(), AGENT_FEATURES),
            categories: states.iter().map(|s| s.category.index()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub dim: usize,
    pub point_mlp: Mlp,
    pub seeds: ParamId,
    pub lane_attn: GatedAttention,
    pub lane_attr: Linear,
    pub fuse: ResidualFfn,
    pub category: ParamId,
    pub agent_mlp: Mlp,
}

impl EncoderParams {
    pub fn new(bd: &mut Builder, dim: usize, heads: usize) -> NnResult<Self> {
        bd.scope("encoder", |bd| {
            Ok(Self {
                dim,
                point_mlp: Mlp::new(bd, "point", LANE_POINT_FEATURES, dim, dim)?,
                seeds: bd.uniform("seed", &[LaneKind::COUNT, dim], 1)?,
                lane_attn: GatedAttention::new(bd, "lane_attn", dim, heads, None, false)?,
                lane_attr: Linear::new(bd, "lane_attr", LANE_ATTR_FEATURES, dim, true)?,
                fuse: ResidualFfn::new(bd, "fuse", dim, 2 * dim)?,
                category: bd.uniform("category", &[AgentCategory::COUNT, CATEGORY_DIM], 1)?,
                agent_mlp: Mlp::new(bd, "agent", AGENT_FEATURES + CATEGORY_DIM, dim, dim)?,
            })
        })
    }

    /// `[M, D]` lane embeddings.
    pub fn encode_lanes(&self, g: &mut Graph, p: &ParamStore, b: &LaneBatch) -> NnResult<NodeId> {
        if b.is_empty() {
            return Ok(g.constant(NdArray::zeros(&[0, self.dim])));
        }
        let feats = g.constant(b.point_features.clone());
        let tokens = self.point_mlp.forward(g, p, feats)?;
        let table = g.param(p, self.seeds);
        let seeds = g.gather_rows(table, b.kinds.clone())?;
        let kv = self.lane_attn.prepare(g, p, tokens, None)?;
        let msg = self.lane_attn.attend(g, p, seeds, &kv, &b.links)?;
        let attrs = g.constant(b.attrs.clone());
        let attr = self.lane_attr.forward(g, p, attrs)?;
        let x = g.add(seeds, msg)?;
        let x = g.add(x, attr)?;
        self.fuse.forward(g, p, x)
    }

    /// `[N, D]` detection embeddings.
    pub fn encode_agents(&self, g: &mut Graph, p: &ParamStore, b: &AgentBatch) -> NnResult<NodeId> {
        if b.is_empty() {
            return Ok(g.constant(NdArray::zeros(&[0, self.dim])));
        }
        let table = g.param(p, self.category);
        let cat = g.gather_rows(table, b.categories.clone())?;
        let feats = g.constant(b.features.clone());
        let x = g.concat(&[feats, cat], 1)?;
        self.agent_mlp.forward(g, p, x)
    }

    /// Embedding of a single lane.
    pub fn encode_lane(&self, p: &ParamStore, lane: &LanePolygon) -> Result<Vec<f64>, ScenarioError> {
        let batch = LaneBatch::new(std::slice::from_ref(lane))?;
        let mut g = Graph::new();
        let e = self.encode_lanes(&mut g, p, &batch).expect("lane batch shapes are consistent");
        Ok(g.value(e).data().to_vec())
    }

    /// Embedding of a single detection.
    pub fn encode_agent(&self, p: &ParamStore, s: &AgentState) -> Vec<f64> {
        let mut g = Graph::new();
        let e = self
            .encode_agents(&mut g, p, &AgentBatch::new(std::slice::from_ref(s)))
            .expect("agent batch shapes are consistent");
        g.value(e).data().to_vec()
    }

    /// Lane embeddings and per-frame detection embeddings. Each frame is encoded on its own.
    pub fn encode_scene(
        &self,
        p: &ParamStore,
        lanes: &[LanePolygon],
        frames: &[Vec<AgentState>],
    ) -> Result<SceneEmbedding, ScenarioError> {
        let batch = LaneBatch::new(lanes)?;
        let mut g = Graph::new();
        let el = self.encode_lanes(&mut g, p, &batch).expect("lane batch shapes are consistent");
        let lanes_emb = g.value(el).clone();
        let frames = frames
            .iter()
            .map(|f| {
                let mut g = Graph::new();
                let e = self
                    .encode_agents(&mut g, p, &AgentBatch::new(f))
                    .expect("agent batch shapes are consistent");
                g.value(e).clone()
            })
            .collect();
        Ok(SceneEmbedding {
            lanes: lanes_emb,
            lane_poses: batch.poses,
            frames,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SceneEmbedding {
    pub lanes: NdArray,
    pub lane_poses: Vec<Pose2>,
    pub frames: Vec<NdArray>,
}
