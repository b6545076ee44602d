//! Evaluation runs, ablation tables, baseline training and the
//! tracking-availability sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::dataset::BaselineKind;
use crate::dataset::Sample;
use crate::histquery::reconstruction_ade;
use crate::model::{AblationFlags, Model, ModelConfig, ModelError, ModelKind, SceneInput};
use crate::objective::{AgentForecast, MetricReport, ObjectiveError, Trajectory};
use crate::par;
use crate::scenario::Scenario;
use crate::trainkit::{train, Checkpoint, TrainConfig, TrainError};

pub const DEFAULT_KS: [usize; 2] = [1, 6];
/// Relative slack of the sweep's monotonicity check.
pub const SWEEP_TOLERANCE: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("n = {n} exceeds the {t_obs} observed frames")]
    SweepRange { n: usize, t_obs: usize },
    #[error("no supervised targets to evaluate")]
    NothingToEvaluate,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

pub fn build_model(flags: AblationFlags, config: ModelConfig, seed: u64) -> Result<Model, HarnessError> {
    Ok(Model::new(config, ModelKind::Himap { flags }, seed)?)
}

/// Trains the tracked baseline with the history access given by `kind`.
pub fn train_baseline(
    kind: BaselineKind,
    mut config: TrainConfig,
    corpus: &[Sample],
    holdout: &[Sample],
) -> Result<Checkpoint, HarnessError> {
    config.kind = ModelKind::Tracked;
    config.baseline = kind;
    Ok(train(config, corpus, holdout)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub seed: u64,
    pub targets: usize,
    pub report: MetricReport,
    pub recon_ade: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model: String,
    pub report: MetricReport,
    /// Mean reconstruction ADE; `None` when the model reconstructs nothing.
    pub recon_ade: Option<f64>,
    /// Reconstruction ADE of all-zero displacements.
    pub zero_recon_ade: f64,
    pub per_scenario: Vec<ScenarioMetrics>,
}

impl Evaluation {
    /// Reconstruction ADE, falling back to the zero-displacement value for
    /// models without a reconstruction.
    pub fn effective_recon_ade(&self) -> f64 {
        self.recon_ade.unwrap_or(self.zero_recon_ade)
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "model,{},recon_ade,zero_recon_ade\n{},{},{},{:.6}\n",
            self.report.csv_header(),
            self.model,
            self.report.csv_row(),
            opt(self.recon_ade),
            self.zero_recon_ade
        )
    }

    pub fn per_scenario_csv(&self) -> String {
        let Some(first) = self.per_scenario.first() else {
            return String::from("seed,targets,recon_ade\n");
        };
        let mut out = format!("seed,targets,{},recon_ade\n", first.report.csv_header());
        for s in &self.per_scenario {
            let ade = s.recon_ade.map_or(String::new(), |x| format!("{x:.6}"));
            out.push_str(&format!("{},{},{},{ade}\n", s.seed, s.targets, s.report.csv_row()));
        }
        out
    }
}

struct Scored {
    forecasts: Vec<AgentForecast>,
    gts: Vec<Trajectory>,
    recon: Vec<f64>,
    zero: Vec<f64>,
}

fn score(model: &Model, s: &Sample, access: &BaselineKind) -> Result<Scored, HarnessError> {
    let mut scored = Scored {
        forecasts: Vec::new(),
        gts: Vec::new(),
        recon: Vec::new(),
        zero: Vec::new(),
    };
    if s.supervision.is_empty() {
        return Ok(scored);
    }
    let tracked = (model.kind == ModelKind::Tracked).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        s.tracked_input(access, &mut rng)
    });
    let pred = model.predict(&s.scene, tracked.as_ref())?;
    for sup in &s.supervision {
        scored.forecasts.push(pred.forecasts[sup.target].clone());
        scored.gts.push(sup.future.clone());
        scored.zero.push(reconstruction_ade(&vec![[0.0, 0.0]; sup.history.len()], &sup.history));
        if let Some(h) = &pred.history {
            scored.recon.push(reconstruction_ade(&h[sup.target], &sup.history));
        }
    }
    Ok(scored)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Metrics over every supervised target of `samples`. `access` sets the
/// history the tracked baseline sees and is ignored otherwise.
pub fn evaluate(model: &Model, samples: &[Sample], ks: &[usize], access: &BaselineKind) -> Result<Evaluation, HarnessError> {
    let scored = par::map(samples, |s| score(model, s, access));
    let (mut forecasts, mut gts, mut recon, mut zero) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut per_scenario = Vec::new();
    for (s, sc) in samples.iter().zip(scored) {
        let sc = sc?;
        if sc.forecasts.is_empty() {
            continue;
        }
        per_scenario.push(ScenarioMetrics {
            seed: s.seed,
            targets: sc.forecasts.len(),
            report: MetricReport::compute(&sc.forecasts, &sc.gts, ks)?,
            recon_ade: (!sc.recon.is_empty()).then(|| mean(&sc.recon)),
        });
        forecasts.extend(sc.forecasts);
        gts.extend(sc.gts);
        recon.extend(sc.recon);
        zero.extend(sc.zero);
    }
    if forecasts.is_empty() {
        return Err(HarnessError::NothingToEvaluate);
    }
    Ok(Evaluation {
        model: model.kind.name(),
        report: MetricReport::compute(&forecasts, &gts, ks)?,
        recon_ade: (!recon.is_empty()).then(|| mean(&recon)),
        zero_recon_ade: mean(&zero),
        per_scenario,
    })
}

/// Evaluates a checkpoint, optionally insisting on a model identity.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    samples: &[Sample],
    ks: &[usize],
    expected: Option<(&ModelConfig, &ModelKind)>,
) -> Result<Evaluation, HarnessError> {
    if let Some((cfg, kind)) = expected {
        ck.expect_model(cfg, kind)?;
    }
    let model = ck.model()?;
    evaluate(&model, samples, ks, &BaselineKind::TrackedFull)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub params: usize,
    pub min_ade_6: f64,
    pub min_fde_6: f64,
    pub mr_6: f64,
    pub recon_ade: f64,
}

pub const ABLATION_HEADER: &str = "name,seed,params,min_ade_6,min_fde_6,mr_6,recon_ade";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.name, self.seed, self.params, self.min_ade_6, self.min_fde_6, self.mr_6, self.recon_ade
        )
    }
}

/// Trains and evaluates each flag set under each seed. The reconstruction
/// column uses the zero-displacement value for models without one.
pub fn run_ablation(
    configs: &[(String, AblationFlags)],
    seeds: &[u64],
    base: &TrainConfig,
    train_set: &[Sample],
    holdout: &[Sample],
    test: &[Sample],
) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, flags) in configs {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.kind = ModelKind::Himap { flags: *flags };
            let ck = train(cfg, train_set, holdout)?;
            let model = ck.model()?;
            let ev = evaluate(&model, test, &[6], &BaselineKind::TrackedFull)?;
            let r6 = ev.report.row(6).expect("K = 6 evaluated");
            rows.push(AblationRow {
                name: name.clone(),
                seed,
                params: model.param_count(),
                min_ade_6: r6.min_ade,
                min_fde_6: r6.min_fde,
                mr_6: r6.miss_rate,
                recon_ade: ev.effective_recon_ade(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub model: String,
    pub min_ade_6: f64,
    pub min_fde_6: f64,
    pub mr_6: f64,
    /// Mean path length of the targets over their last `n` steps.
    pub travel: f64,
}

pub const SWEEP_HEADER: &str = "n,model,min_ade_6,min_fde_6,mr_6,travel";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.n, r.model, r.min_ade_6, r.min_fde_6, r.mr_6, r.travel
            ));
        }
        out
    }

    pub fn series(&self, model: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.model == model).collect()
    }

    /// Where the baseline first matches the identity-free model on `metric`,
    /// interpolated linearly between adjacent `n`.
    pub fn crossover(&self, metric: fn(&SweepRow) -> f64) -> Option<f64> {
        let base = self.series(BASELINE_NAME);
        let himap = self.series(HIMAP_NAME);
        let target = metric(himap.first()?);
        crossover(&base.iter().map(|r| (r.n as f64, metric(r))).collect::<Vec<_>>(), target)
    }

    /// Baseline `metric` never rises by more than `tol` (relative) as `n` grows.
    pub fn baseline_non_increasing(&self, metric: fn(&SweepRow) -> f64, tol: f64) -> bool {
        let base = self.series(BASELINE_NAME);
        base.windows(2).all(|w| metric(w[1]) <= metric(w[0]) * (1.0 + tol))
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let himap = self.series(HIMAP_NAME);
        let base = self.series(BASELINE_NAME);
        let metrics: [(&str, fn(&SweepRow) -> f64); 2] = [("minADE6", |r| r.min_ade_6), ("minFDE6", |r| r.min_fde_6)];
        for (name, f) in metrics {
            let (Some(h), Some(b0), Some(bn)) = (himap.first(), base.first(), base.last()) else {
                continue;
            };
            let line = match self.crossover(f) {
                Some(x) => format!("{name}: baseline reaches the identity-free model at n = {x:.2}"),
                None => format!("{name}: baseline never reaches the identity-free model"),
            };
            out.push_str(&format!(
                "{line}; identity-free {:.4}, baseline {:.4} at n = {} ({:+.1}%) and {:.4} at n = {} ({:+.1}%)\n",
                f(h),
                f(b0),
                b0.n,
                100.0 * (f(b0) - f(h)) / f(h),
                f(bn),
                bn.n,
                100.0 * (f(bn) - f(h)) / f(h),
            ));
        }
        out
    }
}

pub const HIMAP_NAME: &str = "himap";
pub const BASELINE_NAME: &str = "baseline";

/// First `x` where `points` falls to `target` or below, interpolating from
/// the previous point; the first point itself when it already qualifies.
pub fn crossover(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let first = points.first()?;
    if first.1 <= target {
        return Some(first.0);
    }
    points.windows(2).find(|w| w[1].1 <= target).map(|w| {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        x0 + (y0 - target) / (y0 - y1) * (x1 - x0)
    })
}

/// Evaluates the baseline with only the last `n` frames identified, for each
/// `n`, and the identity-free model once, replicated across rows.
pub fn run_tracking_sweep(
    himap: &Model,
    baseline: &Model,
    samples: &[Sample],
    n_values: &[usize],
) -> Result<SweepResult, HarnessError> {
    let t_obs = samples.first().map_or(0, |s| s.scene.frames);
    if let Some(&n) = n_values.iter().find(|&&n| n > t_obs) {
        return Err(HarnessError::SweepRange { n, t_obs });
    }
    let fixed = evaluate(himap, samples, &[6], &BaselineKind::TrackedFull)?;
    let h6 = *fixed.report.row(6).expect("K = 6 evaluated");
    let mut rows = Vec::new();
    for &n in n_values {
        let ev = evaluate(baseline, samples, &[6], &BaselineKind::TrackedPartial { n })?;
        let b6 = ev.report.row(6).expect("K = 6 evaluated");
        let travel: Vec<f64> = samples.iter().flat_map(|s| s.travelled(n)).collect();
        let travel = mean(&travel);
        rows.push(SweepRow {
            n,
            model: HIMAP_NAME.into(),
            min_ade_6: h6.min_ade,
            min_fde_6: h6.min_fde,
            mr_6: h6.miss_rate,
            travel,
        });
        rows.push(SweepRow {
            n,
            model: BASELINE_NAME.into(),
            min_ade_6: b6.min_ade,
            min_fde_6: b6.min_fde,
            mr_6: b6.miss_rate,
            travel,
        });
    }
    Ok(SweepResult { rows })
}

/// Mean prediction latency in seconds for each history length, with
/// otherwise identical full models.
pub fn latency_profile(
    config: &ModelConfig,
    scenarios: &[Scenario],
    steps: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>, HarnessError> {
    let mut out = Vec::new();
    for &t in steps {
        let cfg = ModelConfig {
            history_steps: t,
            ..config.clone()
        };
        let model = build_model(AblationFlags::full(), cfg.clone(), seed)?;
        let scenes = scenarios
            .iter()
            .map(|s| SceneInput::from_scenario(s, &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let start = Instant::now();
        for s in &scenes {
            model.predict(s, None)?;
        }
        out.push((t, start.elapsed().as_secs_f64() / scenes.len().max(1) as f64));
    }
    Ok(out)
}

/// Mean relative latency added per history step, from a least-squares line
/// through `profile` divided by its intercept.
pub fn latency_growth(profile: &[(usize, f64)]) -> Option<f64> {
    if profile.len() < 2 {
        return None;
    }
    let n = profile.len() as f64;
    let mx = profile.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = profile.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = profile.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let sxy: f64 = profile.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    (intercept > 0.0).then(|| slope / intercept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::prepare;
    use crate::scenario::{generate_corpus, GeneratorConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            dim: 16,
            ..ModelConfig::default()
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        let corpus = generate_corpus(&GeneratorConfig::default(), 40, n).unwrap();
        prepare(&corpus, &small()).unwrap()
    }

    #[test]
    fn crossover_interpolates() {
        assert_eq!(crossover(&[(0.0, 3.0), (2.0, 1.0)], 2.0), Some(1.0));
        assert_eq!(crossover(&[(0.0, 1.0), (2.0, 0.5)], 2.0), Some(0.0));
        assert_eq!(crossover(&[(0.0, 3.0), (1.0, 2.5)], 2.0), None);
        assert_eq!(crossover(&[], 2.0), None);
        assert_eq!(crossover(&[(0.0, 4.0), (1.0, 3.0), (3.0, 1.0)], 2.0), Some(2.0));
    }

    #[test]
    fn latency_growth_reads_the_slope() {
        let p: Vec<(usize, f64)> = (0..5).map(|t| (t, 2.0 + 0.1 * t as f64)).collect();
        assert!((latency_growth(&p).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(latency_growth(&p[..1]), None);
    }

    #[test]
    fn evaluation_is_deterministic_and_k_monotone() {
        let s = samples(6);
        let m = build_model(AblationFlags::full(), small(), 2).unwrap();
        let a = evaluate(&m, &s, &DEFAULT_KS, &BaselineKind::TrackedFull).unwrap();
        let b = evaluate(&m, &s, &DEFAULT_KS, &BaselineKind::TrackedFull).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.per_scenario_csv(), b.per_scenario_csv());
        let (r1, r6) = (a.report.row(1).unwrap(), a.report.row(6).unwrap());
        assert!(r1.min_ade >= r6.min_ade && r1.min_fde >= r6.min_fde);
        assert!(a.recon_ade.is_some());
        let off = build_model(AblationFlags::none(), small(), 2).unwrap();
        let e = evaluate(&off, &s, &[6], &BaselineKind::TrackedFull).unwrap();
        assert_eq!(e.recon_ade, None);
        assert_eq!(e.effective_recon_ade(), e.zero_recon_ade);
    }

    #[test]
    fn sweep_rows_and_range() {
        let s = samples(4);
        let himap = build_model(AblationFlags::full(), small(), 1).unwrap();
        let base = Model::new(small(), ModelKind::Tracked, 1).unwrap();
        let r = run_tracking_sweep(&himap, &base, &s, &[0, 3, 10]).unwrap();
        let h = r.series(HIMAP_NAME);
        assert_eq!(h.len(), 3);
        assert!(h.iter().all(|row| row.min_ade_6 == h[0].min_ade_6 && row.min_fde_6 == h[0].min_fde_6));
        assert!(r.series(BASELINE_NAME).windows(2).all(|w| w[1].travel >= w[0].travel));
        assert!(r.csv().starts_with(SWEEP_HEADER));
        assert!(!r.summary().is_empty());
        assert!(matches!(
            run_tracking_sweep(&himap, &base, &s, &[11]),
            Err(HarnessError::SweepRange { n: 11, t_obs: 10 })
        ));
    }
}
