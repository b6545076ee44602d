use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use himap::diffcore::{Graph, NdArray, ParamStore};
use himap::encoder::{lane_point_features, EncoderParams};
use himap::geom::{DescriptorSpec, Pose2, RigidTransform2};
use himap::histquery::history_targets;
use himap::nn::{init_uniform, Builder};
use himap::objective::{self, AgentForecast};
use himap::occupancy::{build_edges, EdgeDirection, OccParams, OccupancyInput};
use himap::scenario::{from_json, generate, to_json, GeneratorConfig};
use himap::trainkit::{lr_at, Schedule};

fn pose() -> impl Strategy<Value = Pose2> {
    (-70.0..70.0f64, -70.0..70.0f64, -3.14..3.14f64).prop_map(|(x, y, h)| Pose2::new(x, y, h))
}

fn frames() -> impl Strategy<Value = Vec<Vec<Pose2>>> {
    prop::collection::vec(prop::collection::vec(pose(), 0..5), 1..4)
}

struct Occ {
    store: ParamStore,
    occ: OccParams,
    lanes: NdArray,
    spec: DescriptorSpec,
}

fn occ(seed: u64, lanes: usize) -> Occ {
    let spec = DescriptorSpec::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occ = OccParams::new(&mut Builder::new(&mut store, &mut rng), 8, 2, spec.width()).unwrap();
    Occ {
        store,
        occ,
        lanes: init_uniform(&mut rng, &[lanes, 8], 1),
        spec,
    }
}

fn stack(o: &Occ, frames: &[Vec<Pose2>], agents: &NdArray, lane_poses: &[Pose2]) -> NdArray {
    let input = OccupancyInput::new(frames, lane_poses, 50.0, &o.spec);
    let mut g = Graph::new();
    let el = g.constant(o.lanes.clone());
    let ea = g.constant(agents.clone());
    let s = o.occ.stack(&mut g, &o.store, el, ea, &input).unwrap();
    g.value(s).clone()
}

fn max_gap(a: &NdArray, b: &NdArray) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edges_respect_radius_without_duplicates(agents in prop::collection::vec(pose(), 0..8), lanes in prop::collection::vec(pose(), 1..8), r in 1.0..80.0f64) {
        let es = build_edges(&agents, &lanes, r, EdgeDirection::AgentToLane);
        let mut seen = std::collections::BTreeSet::new();
        for e in &es.edges {
            prop_assert!(e.desc.distance <= r);
            prop_assert!(seen.insert((e.agent, e.lane)));
        }
    }

    #[test]
    fn occupancy_ignores_detection_order(fr in frames(), lane_poses in prop::collection::vec(pose(), 1..5), seed in 0u64..1000) {
        let o = occ(seed, lane_poses.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = fr.iter().map(Vec::len).sum();
        let agents = init_uniform(&mut rng, &[n, 8], 1);
        let base = stack(&o, &fr, &agents, &lane_poses);

        let mut shuffled = Vec::new();
        let mut rows = Vec::new();
        let mut offset = 0;
        for f in &fr {
            let mut order: Vec<usize> = (0..f.len()).collect();
            order.shuffle(&mut rng);
            shuffled.push(order.iter().map(|&i| f[i]).collect::<Vec<_>>());
            rows.extend(order.iter().map(|&i| agents.row(offset + i).to_vec()));
            offset += f.len();
        }
        let permuted = NdArray::new(vec![n, 8], rows.concat()).unwrap();
        prop_assert!(max_gap(&base, &stack(&o, &shuffled, &permuted, &lane_poses)) < 1e-9);
    }

    #[test]
    fn occupancy_frames_are_independent(fr in frames(), lane_poses in prop::collection::vec(pose(), 1..5), seed in 0u64..1000) {
        let o = occ(seed, lane_poses.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let n: usize = fr.iter().map(Vec::len).sum();
        let agents = init_uniform(&mut rng, &[n, 8], 1);
        let full = stack(&o, &fr, &agents, &lane_poses);
        let m = lane_poses.len();
        let mut offset = 0;
        for (t, f) in fr.iter().enumerate() {
            let rows: Vec<f64> = (offset..offset + f.len()).flat_map(|i| agents.row(i).to_vec()).collect();
            let single = stack(&o, std::slice::from_ref(f), &NdArray::new(vec![f.len(), 8], rows).unwrap(), &lane_poses);
            for j in 0..m {
                prop_assert_eq!(single.row(j), full.row(t * m + j));
            }
            offset += f.len();
        }
    }

    #[test]
    fn lane_features_survive_rigid_motion(seed in 0u64..500, rot in -6.3..6.3f64, tx in -400.0..400.0f64, ty in -400.0..400.0f64) {
        let s = generate(&GeneratorConfig::default(), seed).unwrap();
        let g = RigidTransform2::new(rot, (tx, ty));
        for lane in &s.lanes {
            let a = lane_point_features(lane);
            let b = lane_point_features(&lane.transformed(&g));
            for (ra, rb) in a.iter().zip(&b) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn history_targets_have_fixed_length(len in 1usize..15, steps in 1usize..15, p in pose()) {
        let past: Vec<(f64, f64)> = (0..len).map(|i| (i as f64, 0.5 * i as f64)).collect();
        let h = history_targets(&p, &past, steps);
        prop_assert_eq!(h.len(), steps);
        prop_assert!(h.iter().all(|v| v[0].is_finite() && v[1].is_finite()));
    }

    #[test]
    fn metrics_are_bounded_and_monotone_in_k(seed in 0u64..10_000, horizon in 1usize..13) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traj = |rng: &mut ChaCha8Rng| -> Vec<[f64; 2]> {
            (0..horizon).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect()
        };
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let f = AgentForecast {
            loc: (0..6).map(|_| traj(&mut rng)).collect(),
            scale: vec![vec![[1.0, 1.0]; horizon]; 6],
            pi: raw.iter().map(|v| v / z).collect(),
        };
        let gt = traj(&mut rng);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 1..=6 {
            let row = objective::metrics(std::slice::from_ref(&f), std::slice::from_ref(&gt), k).unwrap();
            prop_assert!(row.min_ade >= 0.0 && row.min_fde >= 0.0 && row.brier_min_fde >= row.min_fde);
            prop_assert!((0.0..=1.0).contains(&row.miss_rate));
            prop_assert!(row.min_ade <= prev.0 && row.min_fde <= prev.1);
            prev = (row.min_ade, row.min_fde);
        }
    }

    #[test]
    fn schedule_stays_in_bounds(total in 1usize..500, warm_frac in 0.0..1.0f64, peak in 1e-5..1e-2f64, min_frac in 0.0..1.0f64, pick in 0.0..1.0f64) {
        let s = Schedule { warmup_steps: (total as f64 * warm_frac) as usize, total_steps: total, lr_peak: peak, lr_min: peak * min_frac };
        let step = (total as f64 * pick) as usize;
        let lr = lr_at(step, &s).unwrap();
        prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
        if step >= s.warmup_steps {
            prop_assert!(lr >= s.lr_min - 1e-15);
        }
        prop_assert!(lr_at(total + 1, &s).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenario_json_round_trips(seed in 0u64..100_000) {
        let s = generate(&GeneratorConfig::default(), seed).unwrap();
        let text = to_json(&s);
        let back = from_json(&text, "prop").unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(to_json(&back), text);
    }

    #[test]
    fn agent_embedding_survives_rigid_motion(seed in 0u64..1000, rot in -6.3..6.3f64, tx in -400.0..400.0f64, ty in -400.0..400.0f64) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::new(&mut Builder::new(&mut store, &mut rng), 8, 2).unwrap();
        let s = generate(&GeneratorConfig::default(), seed).unwrap();
        let g = RigidTransform2::new(rot, (tx, ty));
        for st in &s.frames.last().unwrap().detections {
            let a = enc.encode_agent(&store, st);
            let b = enc.encode_agent(&store, &st.transformed(&g));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn mean_step_length_tracks_the_speed_range() {
    // points (midpoint speed, mean per-step displacement), fit through a line
    let mids = [3.0, 6.0, 9.0, 12.0];
    let means: Vec<f64> = mids
        .iter()
        .map(|&m| {
            let cfg = GeneratorConfig {
                speed_range: (m - 1.0, m + 1.0),
                ..GeneratorConfig::default()
            };
            let corpus = himap::scenario::generate_corpus(&cfg, 0, 125).unwrap();
            let steps: Vec<f64> = corpus
                .iter()
                .flat_map(|s| s.gt_tracks.iter())
                .flat_map(|t| t.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).collect::<Vec<_>>())
                .collect();
            steps.iter().sum::<f64>() / steps.len() as f64
        })
        .collect();
    let n = mids.len() as f64;
    let (mx, my) = (mids.iter().sum::<f64>() / n, means.iter().sum::<f64>() / n);
    let sxy: f64 = mids.iter().zip(&means).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = mids.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = means.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    assert!(sxy > 0.0 && r2 > 0.98, "means {means:?}, r2 {r2}");
}
