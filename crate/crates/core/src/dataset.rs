//! Scenario preparation: identity-free scene inputs plus the supervision and
//! identified tracks that only losses, metrics and the tracked baseline see.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::histquery::history_targets;
use crate::model::{ModelConfig, ModelError, SceneInput, TrackedInput};
use crate::objective::{TargetSupervision, Trajectory};
use crate::par;
use crate::scenario::{AgentState, Scenario};

/// How much identified history the tracked baseline receives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BaselineKind {
    /// Every past frame.
    TrackedFull,
    /// Only the `n` most recent past frames.
    TrackedPartial { n: usize },
    /// Each past frame withheld independently with probability `ratio`.
    MaskedFinetune { ratio: f64 },
}

impl Default for BaselineKind {
    fn default() -> Self {
        BaselineKind::TrackedFull
    }
}

impl BaselineKind {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            BaselineKind::MaskedFinetune { ratio } if !(0.0..=1.0).contains(ratio) => {
                Err(ModelError::Config(format!("masking ratio {ratio} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// One prepared scenario.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub scene: SceneInput,
    /// Targets backed by a ground-truth track.
    pub supervision: Vec<TargetSupervision>,
    /// Per target: identified states from the first frame to the current
    /// one, or `None` for clutter.
    pub tracks: Vec<Option<Vec<AgentState>>>,
}

impl Sample {
    pub fn new(s: &Scenario, cfg: &ModelConfig) -> Result<Self, ModelError> {
        s.validate()?;
        let scene = SceneInput::from_scenario(s, cfg)?;
        let tc = s.current_step();
        let mut supervision = Vec::new();
        let mut tracks = Vec::with_capacity(s.target_agents.len());
        for (i, pose) in scene.target_poses.iter().enumerate() {
            let Some(track) = s.target_track(i) else {
                tracks.push(None);
                continue;
            };
            let gt = &s.gt_tracks[track];
            let horizon = cfg.horizon.min(s.t_future);
            let future: Trajectory = gt[tc + 1..=tc + horizon]
                .iter()
                .map(|st| {
                    let (x, y) = pose.to_local(st.x, st.y);
                    [x, y]
                })
                .collect();
            let past: Vec<(f64, f64)> = gt[..=tc].iter().map(|st| (st.x, st.y)).collect();
            supervision.push(TargetSupervision {
                target: i,
                future,
                history: history_targets(pose, &past, cfg.history_steps),
            });
            tracks.push(Some(gt[..=tc].to_vec()));
        }
        Ok(Self {
            seed: s.seed,
            scene,
            supervision,
            tracks,
        })
    }

    /// Path length of each supervised target over its last `n` steps; never `-0.0`.
    pub fn travelled(&self, n: usize) -> Vec<f64> {
        self.supervision
            .iter()
            .filter_map(|sup| self.tracks[sup.target].as_ref())
            .map(|tr| {
                let tc = tr.len() - 1;
                (tc.saturating_sub(n)..tc)
                    .map(|t| (tr[t + 1].x - tr[t].x).hypot(tr[t + 1].y - tr[t].y))
                    .sum::<f64>()
                    + 0.0
            })
            .collect()
    }

    /// Identified history under `kind`; `rng` drives masking only.
    pub fn tracked_input(&self, kind: &BaselineKind, rng: &mut ChaCha8Rng) -> TrackedInput {
        let histories: Vec<Vec<(usize, AgentState)>> = self
            .tracks
            .iter()
            .map(|tr| {
                let Some(tr) = tr else { return Vec::new() };
                let tc = tr.len() - 1;
                (1..=tc)
                    .filter(|&k| match kind {
                        BaselineKind::TrackedFull => true,
                        BaselineKind::TrackedPartial { n } => k <= *n,
                        BaselineKind::MaskedFinetune { ratio } => rng.random::<f64>() >= *ratio,
                    })
                    .map(|k| (k, tr[tc - k]))
                    .collect()
            })
            .collect();
        TrackedInput::new(&self.scene.target_poses, &histories)
    }
}

pub fn prepare(corpus: &[Scenario], cfg: &ModelConfig) -> Result<Vec<Sample>, ModelError> {
    par::map(corpus, |s| Sample::new(s, cfg)).into_iter().collect()
}
