//! History retrieval without identities: a GRU summarises the occupancy
//! stack per lane, a per-agent query is seeded from the current detection and
//! then unrolled backwards in time, reading one occupancy frame per step and
//! emitting one displacement per step.
//!
//! Step `k` (1-based) reads frame `t_c - k`, clamped to frame 0. Displacement
//! `k` is `p[t_c - k] - p[t_c - k + 1]` in the agent's current local frame, so
//! positions follow by accumulating from the current position.

use crate::diffcore::{DiffError, Graph, NdArray, NodeId, ParamId, ParamStore};
use crate::geom::{fourier_embed, rel_descriptor, DescriptorSpec, Pose2};
use crate::nn::{stack_rows, Builder, GatedAttention, Linear, Mlp, NnResult};
use crate::occupancy::{build_edges, EdgeDirection, EdgeSet};

/// GRU with input and hidden width `dim`. Gate blocks are packed in the
/// order update, reset, candidate.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub dim: usize,
    /// `[D, 3D]` input weights with `[3D]` bias.
    pub input: Linear,
    /// `[D, 3D]` hidden weights.
    pub hidden: ParamId,
}

impl GruParams {
    pub fn new(bd: &mut Builder, name: &str, dim: usize) -> NnResult<Self> {
        bd.scope(name, |bd| {
            Ok(Self {
                dim,
                input: Linear::new(bd, "input", dim, 3 * dim, true)?,
                hidden: bd.uniform("hidden", &[dim, 3 * dim], dim)?,
            })
        })
    }

    fn step_projected(&self, g: &mut Graph, p: &ParamStore, xp: NodeId, h: NodeId) -> NnResult<NodeId> {
        let d = self.dim;
        let u = g.param(p, self.hidden);
        let hp = g.matmul(h, u)?;
        let (xz, xr, xn) = (g.slice(xp, 1, 0, d)?, g.slice(xp, 1, d, 2 * d)?, g.slice(xp, 1, 2 * d, 3 * d)?);
        let (hz, hr, hn) = (g.slice(hp, 1, 0, d)?, g.slice(hp, 1, d, 2 * d)?, g.slice(hp, 1, 2 * d, 3 * d)?);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n)?;
        // (1 - z) * n + z * h = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// One cell update for rows `x` and hidden state `h` (both `[N, D]`).
    pub fn cell(&self, g: &mut Graph, p: &ParamStore, x: NodeId, h: NodeId) -> NnResult<NodeId> {
        let xp = self.input.forward(g, p, x)?;
        self.step_projected(g, p, xp, h)
    }

    /// Runs forward over `frames` blocks of `rows` rows from a zero state;
    /// returns the final `[rows, D]` hidden state.
    pub fn temporal_map(&self, g: &mut Graph, p: &ParamStore, stack: NodeId, frames: usize, rows: usize) -> NnResult<NodeId> {
        if frames == 0 {
            return Err(DiffError::Invalid {
                op: "temporal-map",
                msg: "at least one frame is required".into(),
            });
        }
        let xp = self.input.forward(g, p, stack)?;
        let mut h = g.constant(NdArray::zeros(&[rows, self.dim]));
        for t in 0..frames {
            let xt = g.slice(xp, 0, t * rows, (t + 1) * rows)?;
            h = self.step_projected(g, p, xt, h)?;
        }
        Ok(h)
    }
}

/// Constant inputs of the history module for a set of target agents.
#[derive(Clone, Debug)]
pub struct HistoryInput {
    pub targets: usize,
    pub steps: usize,
    /// Lane-to-agent edges at the current step, shared by every read.
    pub lane_edges: EdgeSet,
    pub lane_features: NdArray,
    /// Frame read at each step.
    pub frame_of_step: Vec<usize>,
    pub direct: DirectInput,
}

/// Detections attended directly when no occupancy maps are used.
#[derive(Clone, Debug, Default)]
pub struct DirectInput {
    /// Row in the stacked per-frame agent embeddings, per source.
    pub agent_rows: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    /// Links `(target, source)` per step.
    pub links: Vec<Vec<(usize, usize)>>,
}

impl HistoryInput {
    /// `frames[t]` holds the poses of frame `t`'s detections in stacked-row
    /// order; targets are poses in the last frame.
    pub fn new(
        targets: &[Pose2],
        lane_poses: &[Pose2],
        frames: &[Vec<Pose2>],
        steps: usize,
        radius: f64,
        direct_cap: usize,
        spec: &DescriptorSpec,
    ) -> Self {
        let lane_edges = build_edges(targets, lane_poses, radius, EdgeDirection::LaneToAgent);
        let lane_features = lane_edges.features(spec);
        let tc = frames.len().saturating_sub(1);
        let frame_of_step: Vec<usize> = (1..=steps).map(|k| tc.saturating_sub(k)).collect();

        let mut offsets = Vec::with_capacity(frames.len());
        let mut acc = 0;
        for f in frames {
            offsets.push(acc);
            acc += f.len();
        }
        let mut direct = DirectInput::default();
        for &f in &frame_of_step {
            let mut links = Vec::new();
            for (a, tp) in targets.iter().enumerate() {
                let mut near: Vec<(f64, usize)> = frames[f]
                    .iter()
                    .enumerate()
                    .map(|(i, dp)| ((dp.x - tp.x).hypot(dp.y - tp.y), i))
                    .filter(|(d, _)| *d <= radius)
                    .collect();
                near.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                near.truncate(direct_cap);
                for (_, i) in near {
                    let desc = rel_descriptor(&frames[f][i], f as i64, tp, tc as i64);
                    links.push((a, direct.agent_rows.len()));
                    direct.agent_rows.push(offsets[f] + i);
                    direct.features.push(fourier_embed(&desc, spec));
                }
            }
            direct.links.push(links);
        }
        Self {
            targets: targets.len(),
            steps,
            lane_edges,
            lane_features,
            frame_of_step,
            direct,
        }
    }

    pub fn lane_links(&self) -> Vec<(usize, usize)> {
        self.lane_edges.edges.iter().enumerate().map(|(i, e)| (e.agent, i)).collect()
    }
}

/// Where the unrolled query reads from.
#[derive(Clone, Copy, Debug)]
pub enum HistorySource {
    /// Occupancy stack `[T * M, D]` with `M` lanes per frame.
    Occupancy { stack: NodeId, lanes: usize },
    /// Stacked per-frame detection embeddings.
    Detections { agents: NodeId },
}

#[derive(Clone, Debug)]
pub struct HistQueryParams {
    pub dim: usize,
    pub init: Option<GatedAttention>,
    pub step: GatedAttention,
    pub displacement: Mlp,
}

/// Unroll output: final query `[A, D]` and displacements `[A, 2 * T_h]`
/// (x, y pairs from the most recent step to the oldest).
#[derive(Clone, Copy, Debug)]
pub struct Unrolled {
    pub query: NodeId,
    pub displacements: Option<NodeId>,
}

impl HistQueryParams {
    pub fn new(bd: &mut Builder, dim: usize, heads: usize, desc_width: usize, with_init: bool) -> NnResult<Self> {
        bd.scope("history", |bd| {
            Ok(Self {
                dim,
                init: if with_init {
                    Some(GatedAttention::new(bd, "init", dim, heads, Some(desc_width), true)?)
                } else {
                    None
                },
                step: GatedAttention::new(bd, "step", dim, heads, Some(desc_width), true)?,
                displacement: Mlp::new(bd, "displacement", dim, dim, 2)?,
            })
        })
    }

    /// Current embedding plus the gated message from `lane_rows` (`[M, D]`)
    /// along the lane-to-agent edges; agents without edges keep their embedding.
    pub fn init_query(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        current: NodeId,
        lane_rows: NodeId,
        input: &HistoryInput,
    ) -> NnResult<NodeId> {
        let Some(init) = &self.init else { return Ok(current) };
        if input.lane_edges.is_empty() {
            return Ok(current);
        }
        let src: Vec<usize> = input.lane_edges.edges.iter().map(|e| e.lane).collect();
        let rows = g.gather_rows(lane_rows, src)?;
        let feats = g.constant(input.lane_features.clone());
        let kv = init.prepare(g, p, rows, Some(feats))?;
        let msg = init.attend(g, p, current, &kv, &input.lane_links())?;
        g.add(current, msg)
    }

    /// Reverse-time unroll over `input.steps` steps with shared weights.
    pub fn unroll(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        q0: NodeId,
        source: HistorySource,
        input: &HistoryInput,
    ) -> NnResult<Unrolled> {
        if input.steps == 0 {
            return Ok(Unrolled {
                query: q0,
                displacements: None,
            });
        }
        let (kv, links_per_step): (Option<_>, Vec<Vec<(usize, usize)>>) = match source {
            HistorySource::Occupancy { stack, lanes } => {
                let e = input.lane_edges.len();
                let mut rows = Vec::with_capacity(e * input.steps);
                for &f in &input.frame_of_step {
                    rows.extend(input.lane_edges.edges.iter().map(|ed| f * lanes + ed.lane));
                }
                let links = (0..input.steps)
                    .map(|k| input.lane_edges.edges.iter().enumerate().map(|(i, ed)| (ed.agent, k * e + i)).collect())
                    .collect();
                if rows.is_empty() {
                    (None, links)
                } else {
                    let src = g.gather_rows(stack, rows)?;
                    let tiled: Vec<Vec<f64>> = (0..input.steps)
                        .flat_map(|_| (0..e).map(|i| input.lane_features.row(i).to_vec()))
                        .collect();
                    let feats = g.constant(stack_rows(&tiled, input.lane_features.shape()[1]));
                    (Some(self.step.prepare(g, p, src, Some(feats))?), links)
                }
            }
            HistorySource::Detections { agents } => {
                let d = &input.direct;
                if d.agent_rows.is_empty() {
                    (None, d.links.clone())
                } else {
                    let src = g.gather_rows(agents, d.agent_rows.clone())?;
                    let width = d.features[0].len();
                    let feats = g.constant(stack_rows(&d.features, width));
                    (Some(self.step.prepare(g, p, src, Some(feats))?), d.links.clone())
                }
            }
        };
        let mut q = q0;
        let mut outs = Vec::with_capacity(input.steps);
        for links in &links_per_step {
            if let Some(kv) = &kv {
                if !links.is_empty() {
                    let msg = self.step.attend(g, p, q, kv, links)?;
                    q = g.add(q, msg)?;
                }
            }
            outs.push(self.displacement.forward(g, p, q)?);
        }
        Ok(Unrolled {
            query: q,
            displacements: Some(g.concat(&outs, 1)?),
        })
    }
}

/// Positions relative to the current one, from accumulated displacements.
pub fn accumulate(displacements: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut acc = [0.0, 0.0];
    displacements
        .iter()
        .map(|d| {
            acc = [acc[0] + d[0], acc[1] + d[1]];
            acc
        })
        .collect()
}

/// Mean L2 between reconstructed and true past positions, both obtained by
/// accumulating displacements from the current position.
pub fn reconstruction_ade(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    if pred.is_empty() {
        return 0.0;
    }
    let (pp, tp) = (accumulate(pred), accumulate(truth));
    pp.iter().zip(&tp).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).sum::<f64>() / pred.len() as f64
}

/// Ground-truth displacements for steps `1..=steps` in the frame of
/// `current`; steps before the first observation repeat the oldest position.
pub fn history_targets(current: &Pose2, past: &[(f64, f64)], steps: usize) -> Vec<[f64; 2]> {
    // past[0] is the oldest observation, past.last() the current one
    let tc = past.len() - 1;
    let local = |i: usize| current.to_local(past[i].0, past[i].1);
    (1..=steps)
        .map(|k| {
            if k > tc {
                return [0.0, 0.0];
            }
            let (a, b) = (local(tc - k), local(tc - k + 1));
            [a.0 - b.0, a.1 - b.1]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::nn::init_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gru(dim: usize, seed: u64) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gru = GruParams::new(&mut Builder::new(&mut store, &mut rng), "gru", dim).unwrap();
        (store, gru)
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar-loop GRU cell straight from the update equations.
    fn cell_oracle(store: &ParamStore, gru: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let d = gru.dim;
        let w = store.get(gru.input.w).data();
        let b = store.get(gru.input.b.unwrap()).data();
        let u = store.get(gru.hidden).data();
        let proj = |m: &[f64], v: &[f64], col: usize| (0..d).map(|i| v[i] * m[i * 3 * d + col]).sum::<f64>();
        (0..d)
            .map(|j| {
                let z = sigmoid(proj(w, x, j) + proj(u, h, j) + b[j]);
                let r = sigmoid(proj(w, x, d + j) + proj(u, h, d + j) + b[d + j]);
                let n = (proj(w, x, 2 * d + j) + r * proj(u, h, 2 * d + j) + b[2 * d + j]).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    #[test]
    fn zero_input_zero_state_stays_zero() {
        let (store, gru) = gru(6, 0);
        let mut g = Graph::new();
        let x = g.constant(NdArray::zeros(&[1, 6]));
        let h = g.constant(NdArray::zeros(&[1, 6]));
        let out = gru.cell(&mut g, &store, x, h).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let (mut store, gru) = gru(6, 1);
        let b = gru.input.b.unwrap();
        for v in &mut store.get_mut(b).data_mut()[..6] {
            *v = 40.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hv = init_uniform(&mut rng, &[1, 6], 1);
        let mut g = Graph::new();
        let x = g.constant(init_uniform(&mut rng, &[1, 6], 1));
        let h = g.constant(hv.clone());
        let out = gru.cell(&mut g, &store, x, h).unwrap();
        for (a, b) in g.value(out).data().iter().zip(hv.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cell_matches_oracle_and_gradients() {
        for seed in 0..100 {
            let (store, gru) = gru(5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let xv = init_uniform(&mut rng, &[1, 5], 1);
            let hv = init_uniform(&mut rng, &[1, 5], 1);
            let mut g = Graph::new();
            let x = g.constant(xv.clone());
            let h = g.constant(hv.clone());
            let out = gru.cell(&mut g, &store, x, h).unwrap();
            let expected = cell_oracle(&store, &gru, xv.data(), hv.data());
            for (a, b) in g.value(out).data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let (store, gru) = gru(4, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let xv = init_uniform(&mut rng, &[3, 4], 1);
        let hv = init_uniform(&mut rng, &[3, 4], 1);
        let report = grad_check(
            |g, p| {
                let x = g.constant(xv.clone());
                let h = g.constant(hv.clone());
                let o = gru.cell(g, p, x, h)?;
                let sq = g.mul(o, o)?;
                g.sum(sq, None)
            },
            &store,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn temporal_map_matches_hand_unroll() {
        let (store, gru) = gru(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = init_uniform(&mut rng, &[6, 4], 1); // 3 steps x 2 lanes
        let mut g = Graph::new();
        let s = g.constant(stack.clone());
        let out = gru.temporal_map(&mut g, &store, s, 3, 2).unwrap();
        for lane in 0..2 {
            let mut h = vec![0.0; 4];
            for t in 0..3 {
                h = cell_oracle(&store, &gru, stack.row(t * 2 + lane), &h);
            }
            for (a, b) in g.value(out).row(lane).iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn history_targets_and_ade() {
        let current = Pose2::new(10.0, 0.0, 0.0);
        let past = [(7.0, 0.0), (8.0, 0.0), (9.0, 0.0), (10.0, 0.0)];
        let t = history_targets(&current, &past, 5);
        assert_eq!(t, vec![[-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(accumulate(&t)[4], [-3.0, 0.0]);
        assert_eq!(reconstruction_ade(&t, &t), 0.0);
        let zero = vec![[0.0, 0.0]; 5];
        assert!((reconstruction_ade(&zero, &t) - (1.0 + 2.0 + 3.0 + 3.0 + 3.0) / 5.0).abs() < 1e-12);
    }
}
