//! Winner-takes-all Laplace regression, mode classification and history
//! reconstruction losses, plus the displacement metric suite.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NdArray, NodeId};
use crate::nn::NnResult;

pub const MISS_THRESHOLD: f64 = 2.0;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("no agents to evaluate")]
    Empty,
    #[error("k_eval {k_eval} exceeds the {modes} available modes")]
    TooManyModes { k_eval: usize, modes: usize },
    #[error("horizon mismatch: {0} predicted vs {1} ground-truth steps")]
    Horizon(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

pub type Trajectory = Vec<[f64; 2]>;

/// One agent's multimodal forecast as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentForecast {
    pub loc: Vec<Trajectory>,
    pub scale: Vec<Trajectory>,
    pub pi: Vec<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn mean_l2(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dist(*x, *y)).sum::<f64>() / a.len() as f64
}

/// Mode with the smallest mean L2 to `gt`; ties go to the lowest index.
pub fn best_mode(loc: &[Trajectory], gt: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (k, traj) in loc.iter().enumerate() {
        let e = mean_l2(traj, gt);
        if e < best_err {
            best = k;
            best_err = e;
        }
    }
    best
}

/// `(1/t_f) sum_t sum_dim [log(2b) + |y - mu| / b]`.
pub fn laplace_nll(loc: &[[f64; 2]], scale: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64, ObjectiveError> {
    if loc.len() != gt.len() || scale.len() != gt.len() {
        return Err(ObjectiveError::Horizon(loc.len(), gt.len()));
    }
    let mut total = 0.0;
    for ((m, b), y) in loc.iter().zip(scale).zip(gt) {
        for d in 0..2 {
            if !(b[d] > 0.0) {
                return Err(ObjectiveError::NonPositiveScale(b[d]));
            }
            total += (2.0 * b[d]).ln() + (y[d] - m[d]).abs() / b[d];
        }
    }
    Ok(total / gt.len() as f64)
}

pub fn mode_cls_loss(pi: &[f64], best: usize) -> f64 {
    -pi[best].max(PROB_FLOOR).ln()
}

/// `(1/t_h) sum_t |recon_t - gt_t|^2`.
pub fn history_loss(recon: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    if recon.is_empty() {
        return 0.0;
    }
    recon
        .iter()
        .zip(gt)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum::<f64>()
        / recon.len() as f64
}

pub fn total_loss(reg: f64, cls: f64, his: f64, w: &LossWeights) -> f64 {
    reg + w.alpha * cls + w.beta * his
}

/// Metrics restricted to the `k_eval` most probable modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub brier_min_fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub count: usize,
}

/// Per-agent metric values for one `k_eval`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentMetrics {
    pub ade: f64,
    pub fde: f64,
    pub missed: bool,
    pub brier_fde: f64,
}

/// Indices of the `k` highest-probability modes (ties to the lower index).
pub fn top_modes(pi: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pi.len()).collect();
    idx.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn agent_metrics(f: &AgentForecast, gt: &[[f64; 2]], k_eval: usize) -> Result<AgentMetrics, ObjectiveError> {
    if k_eval == 0 || k_eval > f.loc.len() {
        return Err(ObjectiveError::TooManyModes {
            k_eval,
            modes: f.loc.len(),
        });
    }
    let last = gt.len() - 1;
    let mut ade = f64::INFINITY;
    let mut fde = f64::INFINITY;
    let mut k_star = 0;
    for k in top_modes(&f.pi, k_eval) {
        if f.loc[k].len() != gt.len() {
            return Err(ObjectiveError::Horizon(f.loc[k].len(), gt.len()));
        }
        ade = ade.min(mean_l2(&f.loc[k], gt));
        let e = dist(f.loc[k][last], gt[last]);
        if e < fde {
            fde = e;
            k_star = k;
        }
    }
    Ok(AgentMetrics {
        ade,
        fde,
        missed: fde > MISS_THRESHOLD,
        brier_fde: fde + (1.0 - f.pi[k_star]).powi(2),
    })
}

pub fn metrics(forecasts: &[AgentForecast], gts: &[Trajectory], k_eval: usize) -> Result<MetricRow, ObjectiveError> {
    if forecasts.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let mut row = MetricRow {
        k: k_eval,
        min_ade: 0.0,
        min_fde: 0.0,
        miss_rate: 0.0,
        brier_min_fde: 0.0,
    };
    for (f, gt) in forecasts.iter().zip(gts) {
        let m = agent_metrics(f, gt, k_eval)?;
        row.min_ade += m.ade;
        row.min_fde += m.fde;
        row.miss_rate += f64::from(u8::from(m.missed));
        row.brier_min_fde += m.brier_fde;
    }
    let n = forecasts.len() as f64;
    row.min_ade /= n;
    row.min_fde /= n;
    row.miss_rate /= n;
    row.brier_min_fde /= n;
    Ok(row)
}

impl MetricReport {
    pub fn compute(forecasts: &[AgentForecast], gts: &[Trajectory], ks: &[usize]) -> Result<Self, ObjectiveError> {
        Ok(Self {
            rows: ks.iter().map(|&k| metrics(forecasts, gts, k)).collect::<Result<_, _>>()?,
            count: forecasts.len(),
        })
    }

    pub fn row(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// Columns: `count`, then `min_ade_K,min_fde_K,mr_K,b_min_fde_K` per K.
    pub fn csv_header(&self) -> String {
        let mut cols = vec!["count".to_string()];
        for r in &self.rows {
            let k = r.k;
            cols.extend([
                format!("min_ade_{k}"),
                format!("min_fde_{k}"),
                format!("mr_{k}"),
                format!("b_min_fde_{k}"),
            ]);
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.count.to_string()];
        for r in &self.rows {
            cols.extend([r.min_ade, r.min_fde, r.miss_rate, r.brier_min_fde].iter().map(|v| format!("{v:.6}")));
        }
        cols.join(",")
    }
}

/// Ground truth for one supervised target.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSupervision {
    /// Target index within the scene's target list.
    pub target: usize,
    pub future: Trajectory,
    pub history: Trajectory,
}

/// Loss terms recorded on a graph; each is a scalar node.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub reg: NodeId,
    pub cls: NodeId,
    pub his: NodeId,
}

/// Winner-takes-all objective averaged over the supervised targets.
/// `loc`/`scale` are `[A * K, 2 t_f]`, `pi` is `[A, K]`, `history` is
/// `[A, 2 T_h]`. The winner is chosen from values, so no gradient flows
/// through the selection.
pub fn loss_graph(
    g: &mut Graph,
    loc: NodeId,
    scale: NodeId,
    pi: NodeId,
    history: Option<NodeId>,
    sup: &[TargetSupervision],
    modes: usize,
    w: &LossWeights,
) -> NnResult<LossNodes> {
    let zero = g.scalar(0.0);
    if sup.is_empty() {
        return Ok(LossNodes {
            total: zero,
            reg: zero,
            cls: zero,
            his: zero,
        });
    }
    let horizon = g.shape(loc)[1] / 2;
    let n = sup.len() as f64;
    let loc_v = g.value(loc).clone();
    let mut rows = Vec::with_capacity(sup.len());
    let mut gt = Vec::with_capacity(sup.len() * 2 * horizon);
    for s in sup {
        let trajs: Vec<Trajectory> = (0..modes)
            .map(|k| {
                let r = loc_v.row(s.target * modes + k);
                (0..horizon).map(|t| [r[2 * t], r[2 * t + 1]]).collect()
            })
            .collect();
        rows.push(s.target * modes + best_mode(&trajs, &s.future));
        gt.extend(s.future.iter().flat_map(|p| [p[0], p[1]]));
    }
    let gt = g.constant(NdArray::new(vec![sup.len(), 2 * horizon], gt)?);
    let mu = g.gather_rows(loc, rows.clone())?;
    let b = g.gather_rows(scale, rows.clone())?;
    let two_b = g.scale(b, 2.0)?;
    let log_term = g.log(two_b, 0.0)?;
    let err = g.sub(gt, mu)?;
    let err = g.abs(err)?;
    let ratio = g.div(err, b)?;
    let per = g.add(log_term, ratio)?;
    let reg = g.sum(per, None)?;
    let reg = g.scale(reg, 1.0 / (horizon as f64 * n))?;

    let flat = g.reshape(pi, &[g.shape(pi)[0] * modes, 1])?;
    let chosen = g.gather_rows(flat, rows)?;
    let logp = g.log(chosen, PROB_FLOOR)?;
    let cls = g.sum(logp, None)?;
    let cls = g.scale(cls, -1.0 / n)?;

    let his = match history {
        Some(h) if g.shape(h)[1] > 0 => {
            let steps = g.shape(h)[1] / 2;
            let hr = g.gather_rows(h, sup.iter().map(|s| s.target).collect())?;
            let gh: Vec<f64> = sup.iter().flat_map(|s| s.history.iter().flat_map(|p| [p[0], p[1]])).collect();
            let gh = g.constant(NdArray::new(vec![sup.len(), 2 * steps], gh)?);
            let d = g.sub(hr, gh)?;
            let sq = g.mul(d, d)?;
            let s = g.sum(sq, None)?;
            g.scale(s, 1.0 / (steps as f64 * n))?
        }
        _ => zero,
    };
    let a = g.scale(cls, w.alpha)?;
    let bh = g.scale(his, w.beta)?;
    let total = g.add(reg, a)?;
    let total = g.add(total, bh)?;
    Ok(LossNodes { total, reg, cls, his })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect()
    }

    #[test]
    fn closed_form_nll_cases() {
        let y = vec![[1.0, 2.0]];
        let v = laplace_nll(&y, &[[1.0, 1.0]], &y).unwrap();
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-15);
        let one = laplace_nll(&[[0.0, 0.0]], &[[0.5, 1.0]], &[[2.0, 0.0]]).unwrap();
        // x: log(1) + 2/0.5 = 4; y: log 2
        assert!((one - (4.0 + 2f64.ln())).abs() < 1e-15);
        assert_eq!(
            laplace_nll(&y, &[[0.0, 1.0]], &y),
            Err(ObjectiveError::NonPositiveScale(0.0))
        );
    }

    #[test]
    fn nll_matches_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (m, y) = (traj(&mut rng, 6), traj(&mut rng, 6));
            let b: Trajectory = (0..6).map(|_| [rng.random_range(0.1..3.0), rng.random_range(0.1..3.0)]).collect();
            let mut oracle = 0.0;
            for t in 0..6 {
                for d in 0..2 {
                    let density = (-(y[t][d] - m[t][d]).abs() / b[t][d]).exp() / (2.0 * b[t][d]);
                    oracle -= density.ln();
                }
            }
            assert!((laplace_nll(&m, &b, &y).unwrap() - oracle / 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_stationary_at_residual() {
        let r = 1.7;
        let f = |b: f64| laplace_nll(&[[0.0, 0.0]], &[[b, 1.0]], &[[r, 0.0]]).unwrap();
        let best = (1..400).map(|i| i as f64 * 0.01).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
        assert!((best - r).abs() < 0.011);
    }

    #[test]
    fn best_mode_cases() {
        let gt = vec![[1.0, 1.0], [2.0, 2.0]];
        let loc = vec![vec![[0.0, 0.0]; 2], gt.clone(), vec![[5.0, 5.0]; 2]];
        assert_eq!(best_mode(&loc, &gt), 1);
        assert_eq!(best_mode(&[gt.clone(), gt.clone()], &gt), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let gt = traj(&mut rng, 5);
            let loc: Vec<Trajectory> = (0..6).map(|_| traj(&mut rng, 5)).collect();
            let errs: Vec<f64> = loc
                .iter()
                .map(|m| m.iter().zip(&gt).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).sum::<f64>())
                .collect();
            let mut oracle = 0;
            for k in 1..6 {
                if errs[k] < errs[oracle] {
                    oracle = k;
                }
            }
            assert_eq!(best_mode(&loc, &gt), oracle);
        }
    }

    #[test]
    fn classification_history_and_total() {
        assert_eq!(mode_cls_loss(&[1.0, 0.0], 0), 0.0);
        assert!((mode_cls_loss(&[1.0 / 6.0; 6], 3) - 6f64.ln()).abs() < 1e-15);
        assert!(mode_cls_loss(&[1.0, 0.0], 1).is_finite());
        let h = vec![[1.0, 2.0]; 4];
        assert_eq!(history_loss(&h, &h), 0.0);
        let off: Trajectory = h.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert_eq!(history_loss(&off, &h), 25.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, &LossWeights { alpha: 0.5, beta: 2.0 }), 8.0);
        assert_eq!(total_loss(1.0, 2.0, 3.0, &LossWeights { alpha: 0.0, beta: 0.0 }), 1.0);
    }

    #[test]
    fn metric_anchor_cases() {
        let gt: Trajectory = (0..5).map(|t| [t as f64, 0.0]).collect();
        let exact = AgentForecast {
            loc: vec![gt.clone()],
            scale: vec![vec![[1.0, 1.0]; 5]],
            pi: vec![0.7],
        };
        let r = metrics(&[exact], &[gt.clone()], 1).unwrap();
        assert_eq!((r.min_ade, r.min_fde, r.miss_rate), (0.0, 0.0, 0.0));
        assert!((r.brier_min_fde - 0.09).abs() < 1e-15);
        let shifted = AgentForecast {
            loc: vec![gt.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect()],
            scale: vec![vec![[1.0, 1.0]; 5]],
            pi: vec![1.0],
        };
        let r = metrics(&[shifted], &[gt], 1).unwrap();
        assert_eq!((r.min_ade, r.min_fde, r.miss_rate), (5.0, 5.0, 1.0));
        assert_eq!(metrics(&[], &[], 1), Err(ObjectiveError::Empty));
    }
}
