//! Identity-free occupancy maps: each frame's detections are written into
//! the lane embeddings through gated cross-attention on the agent-lane graph.

use crate::diffcore::{Graph, NdArray, NodeId, ParamStore};
use crate::geom::{fourier_embed, rel_descriptor, DescriptorSpec, Pose2, RelDescriptor};
use crate::nn::{stack_rows, Builder, GatedAttention, NnResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeDirection {
    AgentToLane,
    LaneToAgent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub agent: usize,
    pub lane: usize,
    pub desc: RelDescriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSet {
    pub direction: EdgeDirection,
    pub radius: f64,
    /// Agent-major order.
    pub edges: Vec<Edge>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// `[E, W]` Fourier features of every edge descriptor.
    pub fn features(&self, spec: &DescriptorSpec) -> NdArray {
        let rows: Vec<Vec<f64>> = self.edges.iter().map(|e| fourier_embed(&e.desc, spec)).collect();
        stack_rows(&rows, spec.width())
    }
}

/// Every (agent, lane) pair whose reference points lie within `r`, with the
/// descriptor taken in the stated direction. Lanes are static, so the time
/// gap is 0.
pub fn build_edges(agents: &[Pose2], lanes: &[Pose2], r: f64, direction: EdgeDirection) -> EdgeSet {
    assert!(r > 0.0, "radius must be positive");
    let mut edges = Vec::new();
    for (a, ap) in agents.iter().enumerate() {
        for (l, lp) in lanes.iter().enumerate() {
            if (ap.x - lp.x).hypot(ap.y - lp.y) > r {
                continue;
            }
            let desc = match direction {
                EdgeDirection::AgentToLane => rel_descriptor(ap, 0, lp, 0),
                EdgeDirection::LaneToAgent => rel_descriptor(lp, 0, ap, 0),
            };
            edges.push(Edge { agent: a, lane: l, desc });
        }
    }
    EdgeSet {
        direction,
        radius: r,
        edges,
    }
}

/// Constant inputs of the occupancy stack over `T` frames.
#[derive(Clone, Debug)]
pub struct OccupancyInput {
    pub frames: usize,
    pub lanes: usize,
    /// Row of each edge's agent in the stacked per-frame agent embeddings.
    pub agent_rows: Vec<usize>,
    /// (frame * lanes + lane, edge) per edge.
    pub links: Vec<(usize, usize)>,
    pub features: NdArray,
    pub edge_counts: Vec<usize>,
}

impl OccupancyInput {
    /// `agent_poses[t]` lists the poses of frame `t`'s detections, in the row
    /// order used for the stacked agent embeddings.
    pub fn new(agent_poses: &[Vec<Pose2>], lane_poses: &[Pose2], r: f64, spec: &DescriptorSpec) -> Self {
        let m = lane_poses.len();
        let mut agent_rows = Vec::new();
        let mut links = Vec::new();
        let mut rows = Vec::new();
        let mut edge_counts = Vec::new();
        let mut offset = 0;
        for (t, poses) in agent_poses.iter().enumerate() {
            let es = build_edges(poses, lane_poses, r, EdgeDirection::AgentToLane);
            edge_counts.push(es.len());
            for e in &es.edges {
                links.push((t * m + e.lane, agent_rows.len()));
                agent_rows.push(offset + e.agent);
                rows.push(fourier_embed(&e.desc, spec));
            }
            offset += poses.len();
        }
        Self {
            frames: agent_poses.len(),
            lanes: m,
            agent_rows,
            links,
            features: stack_rows(&rows, spec.width()),
            edge_counts,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OccParams {
    pub attn: GatedAttention,
}

impl OccParams {
    pub fn new(bd: &mut Builder, dim: usize, heads: usize, desc_width: usize) -> NnResult<Self> {
        Ok(Self {
            attn: GatedAttention::new(bd, "occupancy", dim, heads, Some(desc_width), true)?,
        })
    }

    /// `[T * M, D]` stack: frame `t` occupies rows `t*M .. (t+1)*M`.
    /// `agents` stacks every frame's detection embeddings row-wise.
    pub fn stack(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        lanes: NodeId,
        agents: NodeId,
        input: &OccupancyInput,
    ) -> NnResult<NodeId> {
        let m = input.lanes;
        let tile: Vec<usize> = (0..input.frames).flat_map(|_| 0..m).collect();
        let base = g.gather_rows(lanes, tile)?;
        if input.links.is_empty() {
            return Ok(base);
        }
        let src = g.gather_rows(agents, input.agent_rows.clone())?;
        let feats = g.constant(input.features.clone());
        let kv = self.attn.prepare(g, p, src, Some(feats))?;
        let msg = self.attn.attend(g, p, base, &kv, &input.links)?;
        g.add(base, msg)
    }

    /// Per-edge gate activations `[E, D]`.
    pub fn gates(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        lanes: NodeId,
        agents: NodeId,
        input: &OccupancyInput,
    ) -> NnResult<Option<NodeId>> {
        let m = input.lanes;
        let tile: Vec<usize> = (0..input.frames).flat_map(|_| 0..m).collect();
        let base = g.gather_rows(lanes, tile)?;
        let src = g.gather_rows(agents, input.agent_rows.clone())?;
        let feats = g.constant(input.features.clone());
        let kv = self.attn.prepare(g, p, src, Some(feats))?;
        self.attn.gate_values(g, p, base, &kv, &input.links)
    }
}
