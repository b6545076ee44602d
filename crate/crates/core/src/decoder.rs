//! Query-based multimodal decoder. `K` learnable mode tokens per agent attend
//! to the conditioning tokens, the lane context and each other, then emit the
//! future in chunks; each chunk's endpoint is fed back into its mode token.
//! Locations are in the agent's current local frame.

use crate::diffcore::{Graph, NdArray, NodeId, ParamId, ParamStore};
use crate::nn::{Builder, GatedAttention, KvCache, Linear, Mlp, NnResult, ResidualFfn};

const ENDPOINT_FREQS: [f64; 4] = [1.0 / 64.0, 1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0];
const ENDPOINT_RAW_SCALE: f64 = 0.1;
const ENDPOINT_FEATURES: usize = 4 * ENDPOINT_FREQS.len() + 2;

/// Conditioning token kinds, in token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondKind {
    Query = 0,
    History = 1,
    Agent = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSpec {
    pub dim: usize,
    pub heads: usize,
    pub modes: usize,
    pub horizon: usize,
    pub chunks: usize,
    pub history_steps: usize,
    pub scale_floor: f64,
    pub use_query: bool,
    pub use_history: bool,
    pub use_temporal_map: bool,
}

impl DecoderSpec {
    /// Step counts of each chunk; earlier chunks take the remainder.
    pub fn chunk_sizes(&self) -> Vec<usize> {
        let n = self.chunks.clamp(1, self.horizon);
        let (base, extra) = (self.horizon / n, self.horizon % n);
        (0..n).map(|i| base + usize::from(i < extra)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub spec: DecoderSpec,
    pub modes: ParamId,
    pub cond_type: ParamId,
    pub history_mlp: Option<Mlp>,
    pub history_null: Option<ParamId>,
    pub cond_attn: GatedAttention,
    pub tmap_attn: Option<GatedAttention>,
    pub map_attn: GatedAttention,
    pub self_attn: GatedAttention,
    pub ffn: ResidualFfn,
    pub loc_head: Mlp,
    pub scale_head: Mlp,
    pub pi_head: Mlp,
    pub endpoint: Linear,
}

/// Scene context for decoding `A` agents.
#[derive(Clone, Copy, Debug)]
pub struct DecodeContext {
    /// `[A, D]` current detection embeddings.
    pub agents: NodeId,
    /// `[A, D]` final history queries.
    pub query: Option<NodeId>,
    /// `[A, 2 * T_h]` reconstructed displacements.
    pub history: Option<NodeId>,
    /// `[M, D]` temporal map embedding.
    pub temporal_map: Option<NodeId>,
    /// `[M, D]` lane embeddings.
    pub lanes: NodeId,
}

/// Lane-to-agent edges used by the map attentions.
#[derive(Clone, Debug)]
pub struct DecodeInput {
    pub agents: usize,
    /// (agent, lane) per edge.
    pub edges: Vec<(usize, usize)>,
    pub features: NdArray,
}

#[derive(Clone, Copy, Debug)]
pub struct Forecast {
    /// `[A * K, 2 * t_f]` (x, y) per step, row `a * K + k`.
    pub loc: NodeId,
    /// Same layout as `loc`, strictly positive.
    pub scale: NodeId,
    /// `[A, K]` mode probabilities.
    pub pi: NodeId,
}

impl DecoderParams {
    pub fn new(bd: &mut Builder, spec: DecoderSpec, desc_width: usize) -> NnResult<Self> {
        let (d, h) = (spec.dim, spec.heads);
        let lmax = spec.chunk_sizes()[0];
        bd.scope("decoder", |bd| {
            let (history_mlp, history_null) = if spec.use_history {
                if spec.history_steps > 0 {
                    (Some(Mlp::new(bd, "history", 2 * spec.history_steps, d, d)?), None)
                } else {
                    (None, Some(bd.uniform("history_null", &[1, d], 1)?))
                }
            } else {
                (None, None)
            };
            Ok(Self {
                modes: bd.uniform("modes", &[spec.modes, d], 1)?,
                cond_type: bd.uniform("cond_type", &[3, d], 1)?,
                history_mlp,
                history_null,
                cond_attn: GatedAttention::new(bd, "cond_attn", d, h, None, false)?,
                tmap_attn: if spec.use_temporal_map {
                    Some(GatedAttention::new(bd, "tmap_attn", d, h, Some(desc_width), false)?)
                } else {
                    None
                },
                map_attn: GatedAttention::new(bd, "map_attn", d, h, Some(desc_width), false)?,
                self_attn: GatedAttention::new(bd, "self_attn", d, h, None, false)?,
                ffn: ResidualFfn::new(bd, "ffn", d, 2 * d)?,
                loc_head: Mlp::new(bd, "loc", d, d, 2 * lmax)?,
                scale_head: Mlp::new(bd, "scale", d, d, 2 * lmax)?,
                pi_head: Mlp::new(bd, "pi", d, d, 1)?,
                endpoint: Linear::new(bd, "endpoint", ENDPOINT_FEATURES, d, true)?,
                spec,
            })
        })
    }

    /// `[A, D]` embedding of `[A, 2 * T_h]` displacements; a learned null
    /// token when `T_h = 0`.
    pub fn embed_history(&self, g: &mut Graph, p: &ParamStore, history: Option<NodeId>, agents: usize) -> NnResult<NodeId> {
        match (&self.history_mlp, self.history_null, history) {
            (Some(mlp), _, Some(h)) => mlp.forward(g, p, h),
            (_, Some(null), _) => {
                let t = g.param(p, null);
                g.gather_rows(t, vec![0; agents])
            }
            _ => Err(crate::diffcore::DiffError::Invalid {
                op: "embed-history",
                msg: "history embedding is disabled or the history is missing".into(),
            }),
        }
    }

    fn endpoint_features(&self, g: &mut Graph, end: NodeId) -> NnResult<NodeId> {
        let nf = ENDPOINT_FREQS.len();
        let mut w = NdArray::zeros(&[2, 2 * nf]);
        for (i, f) in ENDPOINT_FREQS.iter().enumerate() {
            w.data_mut()[i] = 2.0 * std::f64::consts::PI * f;
            w.data_mut()[2 * nf + nf + i] = 2.0 * std::f64::consts::PI * f;
        }
        let w = g.constant(w);
        let ang = g.matmul(end, w)?;
        let s = g.sin(ang)?;
        let c = g.cos(ang)?;
        let raw = g.scale(end, ENDPOINT_RAW_SCALE)?;
        g.concat(&[s, c, raw], 1)
    }

    fn round(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        tok: NodeId,
        caches: &RoundCaches,
        links: &RoundLinks,
    ) -> NnResult<NodeId> {
        let m = self.cond_attn.attend(g, p, tok, &caches.cond, &links.cond)?;
        let mut tok = g.add(tok, m)?;
        if let (Some(att), Some(c)) = (&self.tmap_attn, &caches.tmap) {
            let m = att.attend(g, p, tok, c, &links.map)?;
            tok = g.add(tok, m)?;
        }
        if let Some(c) = &caches.map {
            let m = self.map_attn.attend(g, p, tok, c, &links.map)?;
            tok = g.add(tok, m)?;
        }
        let kv = self.self_attn.prepare(g, p, tok, None)?;
        let m = self.self_attn.attend(g, p, tok, &kv, &links.modes)?;
        let tok = g.add(tok, m)?;
        self.ffn.forward(g, p, tok)
    }

    pub fn decode(&self, g: &mut Graph, p: &ParamStore, ctx: &DecodeContext, input: &DecodeInput) -> NnResult<Forecast> {
        let s = &self.spec;
        let (a, k) = (input.agents, s.modes);
        let n = a * k;

        // conditioning tokens, agent-major
        let mut kinds = Vec::new();
        let mut parts = Vec::new();
        if s.use_query {
            let q = ctx.query.ok_or_else(|| missing("final query"))?;
            parts.push(q);
            kinds.push(CondKind::Query);
        }
        if s.use_history {
            parts.push(self.embed_history(g, p, ctx.history, a)?);
            kinds.push(CondKind::History);
        }
        parts.push(ctx.agents);
        kinds.push(CondKind::Agent);
        let c = kinds.len();
        let mut order = Vec::with_capacity(a * c);
        for ai in 0..a {
            for ci in 0..c {
                order.push(ci * a + ai);
            }
        }
        let stacked = g.concat(&parts, 0)?;
        let cond = g.gather_rows(stacked, order)?;
        let types = g.param(p, self.cond_type);
        let type_rows = g.gather_rows(types, (0..a).flat_map(|_| kinds.iter().map(|k| *k as usize)).collect())?;
        let cond = g.add(cond, type_rows)?;

        let mut links = RoundLinks {
            cond: Vec::with_capacity(n * c),
            map: Vec::new(),
            modes: Vec::with_capacity(n * k),
        };
        for ai in 0..a {
            for ki in 0..k {
                let row = ai * k + ki;
                links.cond.extend((0..c).map(|ci| (row, ai * c + ci)));
                links.modes.extend((0..k).map(|kj| (row, ai * k + kj)));
            }
        }
        for (e, &(ai, _)) in input.edges.iter().enumerate() {
            links.map.extend((0..k).map(|ki| (ai * k + ki, e)));
        }
        let lane_idx: Vec<usize> = input.edges.iter().map(|e| e.1).collect();
        let mut caches = RoundCaches {
            cond: self.cond_attn.prepare(g, p, cond, None)?,
            tmap: None,
            map: None,
        };
        if !input.edges.is_empty() {
            let feats = g.constant(input.features.clone());
            if let Some(att) = &self.tmap_attn {
                let tm = ctx.temporal_map.ok_or_else(|| missing("temporal map"))?;
                let rows = g.gather_rows(tm, lane_idx.clone())?;
                caches.tmap = Some(att.prepare(g, p, rows, Some(feats))?);
            }
            let rows = g.gather_rows(ctx.lanes, lane_idx)?;
            caches.map = Some(self.map_attn.prepare(g, p, rows, Some(feats))?);
        }

        let table = g.param(p, self.modes);
        let mut tok = g.gather_rows(table, (0..a).flat_map(|_| 0..k).collect())?;
        let mut start = g.constant(NdArray::zeros(&[n, 2]));
        let mut locs = Vec::new();
        let mut scales = Vec::new();
        let sizes = s.chunk_sizes();
        for (ci, &len) in sizes.iter().enumerate() {
            tok = self.round(g, p, tok, &caches, &links)?;
            let off = self.loc_head.forward(g, p, tok)?;
            let off = g.slice(off, 1, 0, 2 * len)?;
            let tile = g.constant(tile_matrix(len));
            let base = g.matmul(start, tile)?;
            let loc = g.add(base, off)?;
            let sc = self.scale_head.forward(g, p, tok)?;
            let sc = g.slice(sc, 1, 0, 2 * len)?;
            let sc = g.softplus(sc)?;
            let floor = g.scalar(s.scale_floor);
            let sc = g.add(sc, floor)?;
            locs.push(loc);
            scales.push(sc);
            if ci + 1 < sizes.len() {
                start = g.slice(loc, 1, 2 * len - 2, 2 * len)?;
                let f = self.endpoint_features(g, start)?;
                let e = self.endpoint.forward(g, p, f)?;
                tok = g.add(tok, e)?;
            }
        }
        let loc = g.concat(&locs, 1)?;
        let scale = g.concat(&scales, 1)?;
        let logits = self.pi_head.forward(g, p, tok)?;
        let logits = g.reshape(logits, &[a, k])?;
        let pi = g.softmax(logits, 1)?;
        Ok(Forecast { loc, scale, pi })
    }
}

struct RoundCaches {
    cond: KvCache,
    tmap: Option<KvCache>,
    map: Option<KvCache>,
}

struct RoundLinks {
    cond: Vec<(usize, usize)>,
    map: Vec<(usize, usize)>,
    modes: Vec<(usize, usize)>,
}

fn missing(what: &str) -> crate::diffcore::DiffError {
    crate::diffcore::DiffError::Invalid {
        op: "decode",
        msg: format!("decoder expects a {what}"),
    }
}

/// `[2, 2L]` matrix repeating an (x, y) row `L` times.
fn tile_matrix(len: usize) -> NdArray {
    let mut m = NdArray::zeros(&[2, 2 * len]);
    for i in 0..len {
        m.data_mut()[2 * i] = 1.0;
        m.data_mut()[2 * len + 2 * i + 1] = 1.0;
    }
    m
}
