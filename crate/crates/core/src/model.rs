//! The forecasting model: encoder, occupancy stack, temporal map, history
//! query and decoder, each path switchable by [`AblationFlags`]. The tracked
//! baseline shares the encoder and decoder but reads identified histories.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeContext, DecodeInput, DecoderParams, DecoderSpec};
use crate::diffcore::{DiffError, Graph, NdArray, NodeId, ParamStore};
use crate::encoder::{AgentBatch, EncoderParams, LaneBatch};
use crate::geom::{fourier_embed, rel_descriptor, DescriptorSpec, Pose2};
use crate::histquery::{GruParams, HistQueryParams, HistoryInput, HistorySource};
use crate::nn::{stack_rows, Builder, GatedAttention, Linear};
use crate::objective::AgentForecast;
use crate::occupancy::{OccParams, OccupancyInput};
use crate::scenario::{AgentState, DetectionFrame, LanePolygon, Scenario, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("inconsistent ablation flags: {0}")]
    Flags(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("scene has no target agents")]
    NoTargets,
    #[error("the tracked baseline needs identified histories")]
    MissingTracks,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Switches for the optional model paths. Each flag may only be set when the
/// flags it builds on are set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Unroll a per-agent history query and decode past displacements.
    pub recurrent_query: bool,
    /// The query reads occupancy maps instead of raw detections.
    pub hist_occ_map: bool,
    /// Seed the query from the lane context before unrolling.
    pub hist_query_init: bool,
    /// Seed it from the temporal map rather than the current occupancy frame.
    pub hist_temporal_map: bool,
    /// Decoder attends to the temporal map.
    pub dec_temporal_map: bool,
    /// Decoder conditions on the final history query.
    pub dec_updated_query: bool,
    /// Decode the horizon in several chunks.
    pub dec_recurrent: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub const fn full() -> Self {
        Self {
            recurrent_query: true,
            hist_occ_map: true,
            hist_query_init: true,
            hist_temporal_map: true,
            dec_temporal_map: true,
            dec_updated_query: true,
            dec_recurrent: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            recurrent_query: false,
            hist_occ_map: false,
            hist_query_init: false,
            hist_temporal_map: false,
            dec_temporal_map: false,
            dec_updated_query: false,
            dec_recurrent: false,
        }
    }

    /// Cumulative configurations 1..=5: chunked decoding only, then the
    /// direct history query, occupancy maps, query initialisation, and the
    /// temporal map in both history and decoder.
    pub fn cumulative(row: usize) -> Result<Self, ModelError> {
        if !(1..=5).contains(&row) {
            return Err(ModelError::Flags(format!("row {row} is outside 1..=5")));
        }
        let mut f = Self::none();
        f.dec_recurrent = true;
        if row >= 2 {
            f.recurrent_query = true;
            f.dec_updated_query = true;
        }
        f.hist_occ_map = row >= 3;
        f.hist_query_init = row >= 4;
        if row >= 5 {
            f.hist_temporal_map = true;
            f.dec_temporal_map = true;
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let deps = [
            (self.hist_occ_map, self.recurrent_query, "hist_occ_map requires recurrent_query"),
            (self.hist_query_init, self.hist_occ_map, "hist_query_init requires hist_occ_map"),
            (self.hist_temporal_map, self.hist_query_init, "hist_temporal_map requires hist_query_init"),
            (self.dec_updated_query, self.recurrent_query, "dec_updated_query requires recurrent_query"),
        ];
        match deps.iter().find(|(on, dep, _)| *on && !*dep) {
            Some((_, _, msg)) => Err(ModelError::Flags((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn needs_stack(&self) -> bool {
        self.hist_occ_map || self.dec_temporal_map
    }

    pub fn needs_temporal_map(&self) -> bool {
        self.hist_temporal_map || self.dec_temporal_map
    }

    /// Whether any output depends on frames before the current one.
    pub fn reads_past(&self) -> bool {
        self.recurrent_query || self.dec_temporal_map
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.recurrent_query, "recurrent_query"),
            (self.hist_occ_map, "hist_occ_map"),
            (self.hist_query_init, "hist_query_init"),
            (self.hist_temporal_map, "hist_temporal_map"),
            (self.dec_temporal_map, "dec_temporal_map"),
            (self.dec_updated_query, "dec_updated_query"),
            (self.dec_recurrent, "dec_recurrent"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        if on.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", on.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub modes: usize,
    pub horizon: usize,
    /// Reconstructed history length.
    pub history_steps: usize,
    pub chunks: usize,
    /// Agent-lane edge radius in metres.
    pub radius: f64,
    pub scale_floor: f64,
    /// Detections attended per step when the query reads raw detections.
    pub direct_cap: usize,
    /// Temporal attention layers of the tracked baseline.
    pub baseline_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 8,
            modes: 6,
            horizon: 12,
            history_steps: 10,
            chunks: 3,
            radius: 50.0,
            scale_floor: 1e-3,
            direct_cap: 16,
            baseline_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if self.modes == 0 || self.horizon == 0 {
            return bad("modes and horizon must be positive");
        }
        if self.chunks == 0 || self.chunks > self.horizon {
            return bad("chunks must lie in 1..=horizon");
        }
        if !(self.radius > 0.0) || !(self.scale_floor > 0.0) {
            return bad("radius and scale_floor must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Himap { flags: AblationFlags },
    /// Consumes identified past states of each target.
    Tracked,
}

impl ModelKind {
    pub fn name(&self) -> String {
        match self {
            ModelKind::Himap { flags } if *flags == AblationFlags::full() => "himap".into(),
            ModelKind::Himap { flags } => format!("himap[{flags}]"),
            ModelKind::Tracked => "tracked".into(),
        }
    }
}

/// Identity-free model input for one scene, constant across training steps.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub lanes: LaneBatch,
    /// Detections of every frame, stacked in frame order.
    pub agents: AgentBatch,
    pub frames: usize,
    /// Rows of the targets in `agents`.
    pub target_rows: Vec<usize>,
    pub target_poses: Vec<Pose2>,
    pub occupancy: OccupancyInput,
    pub history: HistoryInput,
    pub decode: DecodeInput,
}

impl SceneInput {
    /// `targets` index the last frame's detections.
    pub fn new(
        lanes: &[LanePolygon],
        frames: &[DetectionFrame],
        targets: &[usize],
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let spec = DescriptorSpec::default();
        let lane_batch = LaneBatch::new(lanes)?;
        let states: Vec<AgentState> = frames.iter().flat_map(|f| f.detections.iter().copied()).collect();
        let poses: Vec<Vec<Pose2>> = frames.iter().map(|f| f.detections.iter().map(AgentState::pose).collect()).collect();
        let last = frames.last().ok_or(ModelError::NoTargets)?;
        let offset = states.len() - last.detections.len();
        if let Some(&t) = targets.iter().find(|&&t| t >= last.detections.len()) {
            return Err(ModelError::Config(format!("target {t} is not a current detection")));
        }
        let target_poses: Vec<Pose2> = targets.iter().map(|&t| last.detections[t].pose()).collect();
        let history = HistoryInput::new(
            &target_poses,
            &lane_batch.poses,
            &poses,
            cfg.history_steps,
            cfg.radius,
            cfg.direct_cap,
            &spec,
        );
        let decode = DecodeInput {
            agents: targets.len(),
            edges: history.lane_edges.edges.iter().map(|e| (e.agent, e.lane)).collect(),
            features: history.lane_features.clone(),
        };
        Ok(Self {
            occupancy: OccupancyInput::new(&poses, &lane_batch.poses, cfg.radius, &spec),
            lanes: lane_batch,
            agents: AgentBatch::new(&states),
            frames: frames.len(),
            target_rows: targets.iter().map(|t| offset + t).collect(),
            target_poses,
            history,
            decode,
        })
    }

    pub fn from_scenario(s: &Scenario, cfg: &ModelConfig) -> Result<Self, ModelError> {
        Self::new(&s.lanes, &s.frames, &s.target_agents, cfg)
    }

    pub fn targets(&self) -> usize {
        self.target_rows.len()
    }
}

/// Identified past states of each target, as `(steps before now, state)`.
#[derive(Clone, Debug)]
pub struct TrackedInput {
    pub states: AgentBatch,
    /// `[P, W]` descriptor features of each past state relative to its target.
    pub geometry: NdArray,
    /// `(target, past row)` links.
    pub links: Vec<(usize, usize)>,
}

impl TrackedInput {
    pub fn new(current: &[Pose2], histories: &[Vec<(usize, AgentState)>]) -> Self {
        let spec = DescriptorSpec::default();
        let mut states = Vec::new();
        let mut geo = Vec::new();
        let mut links = Vec::new();
        for (a, (cur, hist)) in current.iter().zip(histories).enumerate() {
            for &(k, st) in hist {
                links.push((a, states.len()));
                let desc = rel_descriptor(&st.pose(), -(k as i64), cur, 0);
                geo.push(fourier_embed(&desc, &spec));
                states.push(st);
            }
        }
        Self {
            states: AgentBatch::new(&states),
            geometry: stack_rows(&geo, spec.width()),
            links,
        }
    }
}

#[derive(Clone, Debug)]
struct TrackedParams {
    geometry: Linear,
    layers: Vec<GatedAttention>,
}

#[derive(Clone, Debug)]
struct Net {
    encoder: EncoderParams,
    occupancy: Option<OccParams>,
    gru: Option<GruParams>,
    history: Option<HistQueryParams>,
    decoder: DecoderParams,
    tracked: Option<TrackedParams>,
}

/// Graph nodes of one forward pass: `loc`/`scale` are `[A * K, 2 t_f]`,
/// `pi` is `[A, K]`, `history` is `[A, 2 T_h]` displacements.
#[derive(Clone, Copy, Debug)]
pub struct Output {
    pub loc: NodeId,
    pub scale: NodeId,
    pub pi: NodeId,
    pub history: Option<NodeId>,
}

/// Plain-value forecasts of every target.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub forecasts: Vec<AgentForecast>,
    /// Reconstructed displacements per target, most recent first.
    pub history: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub store: ParamStore,
    net: Net,
}

impl Model {
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if let ModelKind::Himap { flags } = &kind {
            flags.validate()?;
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build(&mut Builder::new(&mut store, &mut rng), &config, &kind)?;
        Ok(Self { config, kind, store, net })
    }

    /// Rebuilds the module layout and takes parameter values from `store`.
    pub fn from_store(config: ModelConfig, kind: ModelKind, store: &ParamStore) -> Result<Self, ModelError> {
        let mut m = Self::new(config, kind, 0)?;
        m.store.load_values(store)?;
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn has_history(&self) -> bool {
        self.net.history.is_some() && self.config.history_steps > 0
    }

    pub fn forward(&self, g: &mut Graph, scene: &SceneInput, tracked: Option<&TrackedInput>) -> Result<Output, ModelError> {
        self.forward_with(g, &self.store, scene, tracked)
    }

    /// Forward pass reading parameters from `p`, which must share this
    /// model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        scene: &SceneInput,
        tracked: Option<&TrackedInput>,
    ) -> Result<Output, ModelError> {
        if scene.targets() == 0 {
            return Err(ModelError::NoTargets);
        }
        let net = &self.net;
        let lanes = net.encoder.encode_lanes(g, p, &scene.lanes)?;
        let agents = net.encoder.encode_agents(g, p, &scene.agents)?;
        let current = g.gather_rows(agents, scene.target_rows.clone())?;
        let m = scene.lanes.len();

        let mut ctx = DecodeContext {
            agents: current,
            query: None,
            history: None,
            temporal_map: None,
            lanes,
        };
        let mut history = None;
        match self.kind {
            ModelKind::Himap { flags } => {
                let stack = match &net.occupancy {
                    Some(occ) if flags.needs_stack() => Some(occ.stack(g, p, lanes, agents, &scene.occupancy)?),
                    _ => None,
                };
                let tmap = match (&net.gru, stack) {
                    (Some(gru), Some(s)) if flags.needs_temporal_map() => Some(gru.temporal_map(g, p, s, scene.frames, m)?),
                    _ => None,
                };
                if let Some(hq) = &net.history {
                    let q0 = match (flags.hist_query_init, stack) {
                        (true, Some(s)) => {
                            let rows = match tmap {
                                Some(t) if flags.hist_temporal_map => t,
                                _ => {
                                    let tc = scene.frames - 1;
                                    g.slice(s, 0, tc * m, (tc + 1) * m)?
                                }
                            };
                            hq.init_query(g, p, current, rows, &scene.history)?
                        }
                        _ => current,
                    };
                    let source = match stack {
                        Some(s) if flags.hist_occ_map => HistorySource::Occupancy { stack: s, lanes: m },
                        _ => HistorySource::Detections { agents },
                    };
                    let un = hq.unroll(g, p, q0, source, &scene.history)?;
                    history = un.displacements;
                    ctx.history = un.displacements;
                    if flags.dec_updated_query {
                        ctx.query = Some(un.query);
                    }
                }
                if flags.dec_temporal_map {
                    ctx.temporal_map = tmap;
                }
            }
            ModelKind::Tracked => {
                let tp = net.tracked.as_ref().ok_or(ModelError::MissingTracks)?;
                let tr = tracked.ok_or(ModelError::MissingTracks)?;
                let mut summary = current;
                if !tr.links.is_empty() {
                    let emb = net.encoder.encode_agents(g, p, &tr.states)?;
                    let geo = g.constant(tr.geometry.clone());
                    let geo = tp.geometry.forward(g, p, geo)?;
                    let tokens = g.add(emb, geo)?;
                    for layer in &tp.layers {
                        let kv = layer.prepare(g, p, tokens, None)?;
                        let msg = layer.attend(g, p, summary, &kv, &tr.links)?;
                        summary = g.add(summary, msg)?;
                    }
                }
                ctx.query = Some(summary);
            }
        }
        let f = net.decoder.decode(g, p, &ctx, &scene.decode)?;
        Ok(Output {
            loc: f.loc,
            scale: f.scale,
            pi: f.pi,
            history,
        })
    }

    pub fn predict(&self, scene: &SceneInput, tracked: Option<&TrackedInput>) -> Result<Prediction, ModelError> {
        if scene.targets() == 0 {
            return Ok(Prediction {
                forecasts: Vec::new(),
                history: self.has_history().then(Vec::new),
            });
        }
        let mut g = Graph::new();
        let out = self.forward(&mut g, scene, tracked)?;
        let (k, tf) = (self.config.modes, self.config.horizon);
        let (loc, scale, pi) = (g.value(out.loc), g.value(out.scale), g.value(out.pi));
        let pairs = |row: &[f64]| -> Vec<[f64; 2]> { row.chunks_exact(2).map(|c| [c[0], c[1]]).collect() };
        let forecasts = (0..scene.targets())
            .map(|a| AgentForecast {
                loc: (0..k).map(|j| pairs(loc.row(a * k + j))).collect(),
                scale: (0..k).map(|j| pairs(scale.row(a * k + j))).collect(),
                pi: pi.row(a).to_vec(),
            })
            .collect::<Vec<_>>();
        debug_assert!(forecasts.iter().all(|f| f.loc[0].len() == tf));
        let history = out.history.map(|h| {
            let v = g.value(h);
            (0..scene.targets()).map(|a| pairs(v.row(a))).collect()
        });
        Ok(Prediction { forecasts, history })
    }
}

fn build(bd: &mut Builder, cfg: &ModelConfig, kind: &ModelKind) -> Result<Net, ModelError> {
    let (d, h) = (cfg.dim, cfg.heads);
    let w = DescriptorSpec::default().width();
    let encoder = EncoderParams::new(bd, d, h)?;
    let mut net_spec = DecoderSpec {
        dim: d,
        heads: h,
        modes: cfg.modes,
        horizon: cfg.horizon,
        chunks: cfg.chunks,
        history_steps: cfg.history_steps,
        scale_floor: cfg.scale_floor,
        use_query: true,
        use_history: false,
        use_temporal_map: false,
    };
    let (mut occupancy, mut gru, mut history, mut tracked) = (None, None, None, None);
    match kind {
        ModelKind::Himap { flags } => {
            if flags.needs_stack() {
                occupancy = Some(OccParams::new(bd, d, h, w)?);
            }
            if flags.needs_temporal_map() {
                gru = Some(GruParams::new(bd, "temporal_map", d)?);
            }
            if flags.recurrent_query {
                history = Some(HistQueryParams::new(bd, d, h, w, flags.hist_query_init)?);
            }
            net_spec.use_query = flags.dec_updated_query;
            net_spec.use_history = flags.recurrent_query;
            net_spec.use_temporal_map = flags.dec_temporal_map;
            if !flags.dec_recurrent {
                net_spec.chunks = 1;
            }
        }
        ModelKind::Tracked => {
            tracked = Some(bd.scope("tracked", |bd| {
                Ok(TrackedParams {
                    geometry: Linear::new(bd, "geometry", w, d, true)?,
                    layers: (0..cfg.baseline_layers)
                        .map(|i| GatedAttention::new(bd, &format!("layer{i}"), d, h, None, false))
                        .collect::<Result<_, _>>()?,
                })
            })?);
        }
    }
    let decoder = DecoderParams::new(bd, net_spec, w)?;
    Ok(Net {
        encoder,
        occupancy,
        gru,
        history,
        decoder,
        tracked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate, GeneratorConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            dim: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn flag_dependencies_are_named() {
        for row in 1..=5 {
            AblationFlags::cumulative(row).unwrap().validate().unwrap();
        }
        assert_eq!(AblationFlags::cumulative(5).unwrap(), AblationFlags::full());
        let mut f = AblationFlags::none();
        f.hist_query_init = true;
        let err = f.validate().unwrap_err().to_string();
        assert!(err.contains("hist_query_init requires hist_occ_map"), "{err}");
        assert!(AblationFlags::cumulative(6).is_err());
    }

    #[test]
    fn cumulative_rows_grow_parameter_count() {
        let counts: Vec<usize> = (1..=5)
            .map(|r| {
                Model::new(small(), ModelKind::Himap { flags: AblationFlags::cumulative(r).unwrap() }, 0)
                    .unwrap()
                    .param_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn every_configuration_predicts() {
        let s = generate(&GeneratorConfig::default(), 3).unwrap();
        let cfg = small();
        let scene = SceneInput::from_scenario(&s, &cfg).unwrap();
        let mut kinds: Vec<ModelKind> = (1..=5)
            .map(|r| ModelKind::Himap { flags: AblationFlags::cumulative(r).unwrap() })
            .collect();
        kinds.push(ModelKind::Himap { flags: AblationFlags::none() });
        for kind in kinds {
            let m = Model::new(cfg.clone(), kind, 1).unwrap();
            let p = m.predict(&scene, None).unwrap();
            assert_eq!(p.forecasts.len(), scene.targets());
            for f in &p.forecasts {
                assert!((f.pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(f.loc.len(), 6);
                assert_eq!(f.loc[0].len(), 12);
            }
            assert_eq!(p.history.is_some(), m.has_history(), "{}", kind.name());
        }
        let tracked = Model::new(cfg, ModelKind::Tracked, 1).unwrap();
        assert!(matches!(tracked.predict(&scene, None), Err(ModelError::MissingTracks)));
    }

    #[test]
    fn store_round_trip_reproduces_outputs() {
        let s = generate(&GeneratorConfig::default(), 4).unwrap();
        let kind = ModelKind::Himap { flags: AblationFlags::full() };
        let m = Model::new(small(), kind, 9).unwrap();
        let scene = SceneInput::from_scenario(&s, &m.config).unwrap();
        let copy = Model::from_store(small(), kind, &m.store).unwrap();
        assert_eq!(m.predict(&scene, None).unwrap(), copy.predict(&scene, None).unwrap());
        let other = ModelKind::Himap { flags: AblationFlags::none() };
        assert!(Model::from_store(small(), other, &m.store).is_err());
    }
}
