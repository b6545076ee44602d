//! AdamW with a warmup-cosine schedule, the deterministic training loop and
//! JSON checkpoints.
//!
//! Every random choice of a step (batch composition, history masking) is
//! derived from the seed and the step index alone, so a run resumed from a
//! checkpoint continues exactly as the uninterrupted run would.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BaselineKind, Sample};
use crate::diffcore::{DiffError, Graph, GradientMap, NdArray, ParamStore};
use crate::histquery::reconstruction_ade;
use crate::model::{AblationFlags, Model, ModelConfig, ModelError, ModelKind, TrackedInput};
use crate::objective::{loss_graph, LossNodes, LossWeights};
use crate::par;

pub const CHECKPOINT_FORMAT: &str = "himap-checkpoint/1";

const ORDER_STREAM: u64 = 1 << 32;
const MASK_STREAM: u64 = 2 << 32;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("the training corpus is empty")]
    EmptyCorpus,
    #[error("step {step} outside 0..={total}")]
    StepRange { step: usize, total: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("checkpoint format `{0}` is not supported")]
    Format(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
}

/// Linear ramp from 0 to the peak over the warmup, then cosine decay to
/// `lr_min` at `total_steps`.
pub fn lr_at(step: usize, s: &Schedule) -> Result<f64, TrainError> {
    if step > s.total_steps {
        return Err(TrainError::StepRange {
            step,
            total: s.total_steps,
        });
    }
    if step < s.warmup_steps {
        return Ok(s.lr_peak * step as f64 / s.warmup_steps as f64);
    }
    let span = s.total_steps - s.warmup_steps;
    if span == 0 {
        return Ok(s.lr_peak);
    }
    let progress = (step - s.warmup_steps) as f64 / span as f64;
    Ok(s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub hyper: AdamHyper,
    /// Accepted updates so far.
    pub step: u64,
    pub m: Vec<NdArray>,
    pub v: Vec<NdArray>,
}

impl OptimState {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: Vec<NdArray> = store.entries().iter().map(|e| NdArray::zeros(e.value.shape())).collect();
        Self {
            hyper,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One AdamW update. Decay `p <- p - lr * wd * p` is applied apart from
    /// the adaptive step. Non-finite gradients leave everything untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradientMap, lr: f64) -> Result<(), TrainError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(TrainError::Mismatch("optimizer state and parameters differ in length".into()));
        }
        if !grads.is_finite() {
            return Err(TrainError::Diff(DiffError::Invalid {
                op: "optimizer",
                msg: "non-finite gradient".into(),
            }));
        }
        let h = self.hyper;
        self.step += 1;
        let c1 = 1.0 - h.beta1.powi(self.step as i32);
        let c2 = 1.0 - h.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + h.eps);
                p[j] -= lr * h.weight_decay * p[j];
                p[j] -= lr * step;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` to norm `max_norm` when larger; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut GradientMap, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub log_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Held-out samples scored for the log's reconstruction error.
    pub holdout_limit: usize,
    pub loss: LossWeights,
    pub model: ModelConfig,
    pub kind: ModelKind,
    /// History access of the tracked baseline during training.
    pub baseline: BaselineKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamHyper::default();
        Self {
            seed: 0,
            steps: 5000,
            batch_size: 8,
            warmup_steps: 200,
            lr_peak: 3e-4,
            lr_min: 0.0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            clip_norm: 5.0,
            log_every: 100,
            checkpoint_every: 0,
            holdout_limit: 64,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            kind: ModelKind::Himap {
                flags: AblationFlags::full(),
            },
            baseline: BaselineKind::TrackedFull,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_steps > self.steps {
            return bad("warmup_steps exceeds steps");
        }
        if !(self.lr_peak > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr_peak {
            return bad("need 0 <= lr_min <= lr_peak and lr_peak > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("weight_decay and clip_norm must be non-negative");
        }
        if !(self.loss.alpha >= 0.0 && self.loss.beta >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        self.model.validate()?;
        if let ModelKind::Himap { flags } = &self.kind {
            flags.validate()?;
        }
        self.baseline.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            lr_peak: self.lr_peak,
            lr_min: self.lr_min,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Hash of the model identity (architecture config and kind).
    pub fn fingerprint(&self) -> String {
        model_fingerprint(&self.model, &self.kind)
    }
}

pub fn model_fingerprint(model: &ModelConfig, kind: &ModelKind) -> String {
    let json = serde_json::to_string(&(model, kind)).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One log entry. `step` counts completed steps; the losses are the batch
/// means measured before that step's update, `recon_ade` is the held-out
/// reconstruction error after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_his: f64,
    pub recon_ade: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,lr,loss,l_reg,l_cls,l_his,recon_ade";

    pub fn to_csv(&self) -> String {
        let ade = self.recon_ade.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{ade}",
            self.step, self.lr, self.loss, self.l_reg, self.l_cls, self.l_his
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LogRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub fingerprint: String,
    pub config: TrainConfig,
    pub step: usize,
    pub params: ParamStore,
    pub optim: OptimState,
    pub history: Vec<LogRow>,
    /// Steps rejected for non-finite gradients.
    pub incidents: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let mut ck: Self = serde_json::from_str(text).map_err(|e| TrainError::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Format(ck.format));
        }
        if ck.fingerprint != ck.config.fingerprint() {
            return Err(TrainError::Mismatch("stored fingerprint differs from the stored config".into()));
        }
        ck.params.reindex();
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    pub fn model(&self) -> Result<Model, TrainError> {
        Ok(Model::from_store(self.config.model.clone(), self.config.kind, &self.params)?)
    }

    /// Rejects a checkpoint built for another model, naming the differing fields.
    pub fn expect_model(&self, model: &ModelConfig, kind: &ModelKind) -> Result<(), TrainError> {
        if model_fingerprint(model, kind) == self.fingerprint {
            return Ok(());
        }
        let mine = serde_json::to_value((&self.config.model, &self.config.kind)).expect("serializes");
        let theirs = serde_json::to_value((model, kind)).expect("serializes");
        let mut diffs = Vec::new();
        diff_values("", &mine, &theirs, &mut diffs);
        Err(TrainError::Mismatch(diffs.join("; ")))
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = format!("{path}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_values(&p, u, v, out),
                    (u, v) => out.push(format!("{p}: {u:?} vs {v:?}")),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                diff_values(&format!("{path}[{i}]"), u, v, out);
            }
        }
        _ if a != b => out.push(format!("{path}: checkpoint {a} vs requested {b}")),
        _ => {}
    }
}

fn io_err(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Loss terms of one sample, recorded on `g` with parameters from `p`.
pub fn sample_loss(
    model: &Model,
    g: &mut Graph,
    p: &ParamStore,
    sample: &Sample,
    tracked: Option<&TrackedInput>,
    w: &LossWeights,
) -> Result<LossNodes, TrainError> {
    let out = model.forward_with(g, p, &sample.scene, tracked)?;
    Ok(loss_graph(
        g,
        out.loc,
        out.scale,
        out.pi,
        out.history,
        &sample.supervision,
        model.config.modes,
        w,
    )?)
}

/// Mean reconstruction ADE over supervised targets, or `None` when the
/// model reconstructs no history.
pub fn holdout_recon_ade(model: &Model, samples: &[Sample]) -> Result<Option<f64>, TrainError> {
    if !model.has_history() {
        return Ok(None);
    }
    let per: Vec<Result<(f64, usize), TrainError>> = par::map(samples, |s| {
        if s.supervision.is_empty() {
            return Ok((0.0, 0));
        }
        let pred = model.predict(&s.scene, None)?;
        let hist = pred.history.expect("history-enabled model");
        Ok((
            s.supervision.iter().map(|sup| reconstruction_ade(&hist[sup.target], &sup.history)).sum(),
            s.supervision.len(),
        ))
    });
    let (mut total, mut n) = (0.0, 0);
    for r in per {
        let (t, c) = r?;
        total += t;
        n += c;
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Scenario indices of the batch used at `step`: a fresh permutation per
/// epoch, consumed in consecutive slices.
pub fn batch_indices(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    let bs = batch_size.min(n);
    let per_epoch = (n / bs).max(1);
    let (epoch, pos) = (step / per_epoch, step % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ORDER_STREAM | epoch as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm[pos * bs..(pos + 1) * bs].to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub loss: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_his: f64,
    pub grad_norm: f64,
    pub accepted: bool,
}

pub enum TrainEvent<'a> {
    Log(&'a LogRow),
    Checkpoint(&'a Trainer),
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: OptimState,
    pub step: usize,
    pub history: Vec<LogRow>,
    pub incidents: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.kind, config.seed)?;
        let optim = OptimState::new(&model.store, config.adam());
        Ok(Self {
            config,
            model,
            optim,
            step: 0,
            history: Vec::new(),
            incidents: 0,
        })
    }

    /// Continues from `ck`; `steps` may extend the original run length.
    pub fn from_checkpoint(ck: Checkpoint, steps: Option<usize>) -> Result<Self, TrainError> {
        let mut config = ck.config.clone();
        if let Some(s) = steps {
            config.steps = s;
        }
        config.validate()?;
        Ok(Self {
            model: ck.model()?,
            config,
            optim: ck.optim,
            step: ck.step,
            history: ck.history,
            incidents: ck.incidents,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            fingerprint: self.config.fingerprint(),
            config: self.config.clone(),
            step: self.step,
            params: self.model.store.clone(),
            optim: self.optim.clone(),
            history: self.history.clone(),
            incidents: self.incidents,
        }
    }

    fn tracked_inputs(&self, batch: &[&Sample]) -> Option<Vec<TrackedInput>> {
        if self.model.kind != ModelKind::Tracked {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(MASK_STREAM | self.step as u64);
        Some(batch.iter().map(|s| s.tracked_input(&self.config.baseline, &mut rng)).collect())
    }

    /// Batch-mean gradient and loss terms at the current parameters.
    pub fn batch_gradient(&self, batch: &[&Sample]) -> Result<(GradientMap, [f64; 4], usize), TrainError> {
        let tracked = self.tracked_inputs(batch);
        let jobs: Vec<(usize, &Sample)> = batch.iter().copied().enumerate().collect();
        let w = self.config.loss;
        let results = par::map(&jobs, |&(i, s)| -> Result<Option<(GradientMap, [f64; 4])>, TrainError> {
            if s.supervision.is_empty() {
                return Ok(None);
            }
            let mut g = Graph::new();
            let t = tracked.as_ref().map(|v| &v[i]);
            let l = sample_loss(&self.model, &mut g, &self.model.store, s, t, &w)?;
            let terms = [l.total, l.reg, l.cls, l.his].map(|n| g.value(n).item());
            let grads = g.backward(l.total, &self.model.store)?;
            Ok(Some((grads, terms)))
        });
        let mut total = GradientMap::zeros(&self.model.store);
        let mut terms = [0.0; 4];
        let mut used = 0;
        for r in results {
            if let Some((gm, t)) = r? {
                total.accumulate(&gm);
                for (a, b) in terms.iter_mut().zip(t) {
                    *a += b;
                }
                used += 1;
            }
        }
        if used > 0 {
            total.scale(1.0 / used as f64);
            terms.iter_mut().for_each(|t| *t /= used as f64);
        }
        Ok((total, terms, used))
    }

    pub fn train_step(&mut self, train: &[Sample]) -> Result<StepStats, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let idx = batch_indices(self.config.seed, self.step, train.len(), self.config.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let (mut grads, terms, used) = self.batch_gradient(&batch)?;
        let lr = lr_at(self.step + 1, &self.config.schedule())?;
        let finite = terms.iter().all(|t| t.is_finite()) && grads.is_finite();
        let grad_norm = if finite { clip_global_norm(&mut grads, self.config.clip_norm) } else { f64::NAN };
        let accepted = finite && used > 0;
        if accepted {
            self.optim.apply(&mut self.model.store, &grads, lr)?;
        } else if !finite {
            self.incidents += 1;
            log::warn!("step {}: non-finite loss or gradient, update skipped", self.step);
        }
        self.step += 1;
        Ok(StepStats {
            lr,
            loss: terms[0],
            l_reg: terms[1],
            l_cls: terms[2],
            l_his: terms[3],
            grad_norm,
            accepted,
        })
    }

    /// Trains until `config.steps`, reporting log rows and checkpoints.
    pub fn run<F>(&mut self, train: &[Sample], holdout: &[Sample], mut hook: F) -> Result<(), TrainError>
    where
        F: FnMut(TrainEvent<'_>) -> Result<(), TrainError>,
    {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let holdout = &holdout[..holdout.len().min(self.config.holdout_limit)];
        while self.step < self.config.steps {
            let st = self.train_step(train)?;
            let done = self.step == self.config.steps;
            let log_every = self.config.log_every.max(1);
            if self.step == 1 || self.step % log_every == 0 || done {
                let row = LogRow {
                    step: self.step,
                    lr: st.lr,
                    loss: st.loss,
                    l_reg: st.l_reg,
                    l_cls: st.l_cls,
                    l_his: st.l_his,
                    recon_ade: holdout_recon_ade(&self.model, holdout)?,
                };
                log::info!("{}", row.to_csv());
                self.history.push(row);
                hook(TrainEvent::Log(&row))?;
            }
            let every = self.config.checkpoint_every;
            if done || (every > 0 && self.step % every == 0) {
                hook(TrainEvent::Checkpoint(self))?;
            }
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final checkpoint.
pub fn train(config: TrainConfig, train: &[Sample], holdout: &[Sample]) -> Result<Checkpoint, TrainError> {
    let mut t = Trainer::new(config)?;
    t.run(train, holdout, |_| Ok(()))?;
    Ok(t.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamId;

    fn sched() -> Schedule {
        Schedule {
            warmup_steps: 10,
            total_steps: 110,
            lr_peak: 1e-3,
            lr_min: 1e-5,
        }
    }

    #[test]
    fn schedule_anchors() {
        let s = sched();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert_eq!(lr_at(10, &s).unwrap(), 1e-3);
        assert!((lr_at(110, &s).unwrap() - 1e-5).abs() < 1e-18);
        assert!((lr_at(60, &s).unwrap() - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        assert!(matches!(lr_at(111, &s), Err(TrainError::StepRange { .. })));
        // continuity at the warmup boundary
        assert!((lr_at(9, &s).unwrap() - 0.9e-3).abs() < 1e-15);
        assert!((lr_at(11, &s).unwrap() - 1e-3).abs() < 1e-6);
    }

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("p", NdArray::scalar(v)).unwrap();
        (s, id)
    }

    fn grads_of(store: &ParamStore, g: f64) -> GradientMap {
        let mut graph = Graph::new();
        let p = graph.param(store, ParamId(0));
        let l = graph.scale(p, g).unwrap();
        graph.backward(l, store).unwrap()
    }

    #[test]
    fn adamw_closed_form_cases() {
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let (mut s, id) = scalar_store(2.0);
        let mut o = OptimState::new(&s, hyper);
        let z = GradientMap::zeros(&s);
        o.apply(&mut s, &z, 0.1).unwrap();
        assert_eq!(s.get(id).item(), 2.0);

        let (mut s, id) = scalar_store(2.0);
        let mut o = OptimState::new(&s, hyper);
        let g = grads_of(&s, 1.0);
        o.apply(&mut s, &g, 0.1).unwrap();
        // bias-corrected moments are exactly g and g^2
        assert!((s.get(id).item() - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let (mut s, id) = scalar_store(2.0);
        let mut o = OptimState::new(&s, AdamHyper { weight_decay: 0.5, ..hyper });
        for _ in 0..3 {
            let z = GradientMap::zeros(&s);
        o.apply(&mut s, &z, 0.1).unwrap();
        }
        assert!((s.get(id).item() - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let (mut s, id) = scalar_store(2.0);
        let mut o = OptimState::new(&s, AdamHyper::default());
        let mut g = grads_of(&s, 1.0);
        g.scale(f64::NAN);
        assert!(o.apply(&mut s, &g, 0.1).is_err());
        assert_eq!(s.get(id).item(), 2.0);
        assert_eq!(o.step, 0);
    }

    #[test]
    fn clipping_never_grows_the_norm() {
        let (s, _) = scalar_store(0.0);
        for (v, max) in [(10.0, 5.0), (3.0, 5.0), (-7.0, 1.0)] {
            let mut g = grads_of(&s, v);
            let before = g.global_norm();
            clip_global_norm(&mut g, max);
            assert!(g.global_norm() <= before);
            assert!(g.global_norm() <= max + 1e-12);
        }
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 20;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, n, 4)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, n, 4), batch_indices(3, 7, n, 4));
        assert_ne!(batch_indices(3, 0, n, 4), batch_indices(3, 5, n, 4));
        assert_eq!(batch_indices(0, 0, 3, 8).len(), 3);
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("steps = 10\nwarmup_steps = 2\n[model]\ndim = 16\n").unwrap();
        assert_eq!((partial.steps, partial.model.dim, partial.batch_size), (10, 16, 8));
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("steps = 10\nwarmup_steps = 20").is_err());
        let kinds = "[kind]\ntype = \"himap\"\n[kind.flags]\nrecurrent_query = false\n";
        let err = TrainConfig::from_toml(kinds).unwrap_err().to_string();
        assert!(err.contains("requires recurrent_query"), "{err}");
    }
}
