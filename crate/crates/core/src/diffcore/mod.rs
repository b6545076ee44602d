//! Dense-array computation tape with reverse-mode gradients.
//!
//! A [`Graph`] is built fresh for every forward pass: parameters enter as
//! leaves taken from a [`ParamStore`], each recorded [`Op`] is evaluated
//! eagerly, and [`Graph::backward`] returns a [`GradientMap`] aligned with the
//! store. Everything is `f64`.

mod array;
mod gradcheck;
mod graph;
mod params;

pub use array::NdArray;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId, Op, LAYER_NORM_EPS};
pub use params::{GradientMap, ParamEntry, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
        let n = shape.iter().product();
        NdArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn elementwise_mul_scalar() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::vector(vec![2.0]));
        let b = g.constant(NdArray::vector(vec![3.0]));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::vector(vec![1.0, 1.0, 1.0]));
        let s = g.softmax(a, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_matches_hand_computation() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.layer_norm(a, 1).unwrap();
        // mean 2, population variance 2/3
        let s = (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        let want = [-1.0 / s, 0.0, 1.0 / s];
        for (v, w) in g.value(y).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-15, "{v} vs {w}");
        }
        let out = g.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 3.0;
        let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(NdArray::zeros(&[2, 3]));
        let b = g.constant(NdArray::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::Shape {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
        assert!(err.to_string().contains("matmul"));
        let c = g.constant(NdArray::zeros(&[2]));
        assert!(matches!(g.add(a, c), Err(DiffError::Shape { op: "add", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.register("x", NdArray::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let xn = g.param(&store, x);
        let y = g.mul(xn, xn).unwrap();
        let grads = g.backward(y, &store).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let z = store.register("z", random(&mut rng, &[5])).unwrap();
        let mut g = Graph::new();
        let zn = g.param(&store, z);
        let s = g.softmax(zn, 0).unwrap();
        let l = g.sum(s, None).unwrap();
        let grads = g.backward(l, &store).unwrap();
        for v in grads.get(z).data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let a = g.constant(NdArray::zeros(&[2]));
        assert_eq!(g.backward(a, &store), Err(DiffError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn frozen_and_unreachable_params_get_zero() {
        let mut store = ParamStore::new();
        let a = store.register("a", NdArray::scalar(2.0)).unwrap();
        let f = store.register_frozen("f", NdArray::scalar(5.0)).unwrap();
        let u = store.register("unused", NdArray::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new();
        let an = g.param(&store, a);
        let fnode = g.param(&store, f);
        let y = g.mul(an, fnode).unwrap();
        let grads = g.backward(y, &store).unwrap();
        assert_eq!(grads.get(a).item(), 5.0);
        assert_eq!(grads.get(f).item(), 0.0);
        assert_eq!(grads.get(u), &NdArray::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_sum_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let a = store.register("a", random(&mut rng, &[3, 4])).unwrap();
        let b = store.register("b", random(&mut rng, &[4, 2])).unwrap();
        let f = |g: &mut Graph, s: &ParamStore| {
            let an = g.param(s, a);
            let bn = g.param(s, b);
            let c = g.matmul(an, bn)?;
            g.sum(c, None)
        };
        // independent oracle: hand-rolled central differences on the raw arrays
        let eval = |s: &ParamStore| -> f64 {
            let (av, bv) = (s.get(a).data(), s.get(b).data());
            let mut total = 0.0;
            for i in 0..3 {
                for j in 0..2 {
                    for p in 0..4 {
                        total += av[i * 4 + p] * bv[p * 2 + j];
                    }
                }
            }
            total
        };
        let mut g = Graph::new();
        let loss = f(&mut g, &store).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        let eps = 1e-5;
        let mut work = store.clone();
        for id in [a, b] {
            for i in 0..store.get(id).len() {
                let orig = work.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + eps;
                let plus = eval(&work);
                work.get_mut(id).data_mut()[i] = orig - eps;
                let minus = eval(&work);
                work.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads.get(id).data()[i];
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
                assert!(rel < 1e-6, "{} [{i}]: {analytic} vs {numeric}", store.name(id));
            }
        }
    }

    #[test]
    fn grad_check_identity_is_exact() {
        let mut store = ParamStore::new();
        let x = store.register("x", NdArray::scalar(0.7)).unwrap();
        let report = grad_check(|g, s| Ok(g.param(s, x)), &store, 1e-5, None).unwrap();
        assert!(report.max_rel_error < 1e-10);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn grad_check_reports_non_finite_node() {
        let mut store = ParamStore::new();
        let x = store.register("x", NdArray::vector(vec![1.0, 0.0])).unwrap();
        let err = grad_check(
            |g, s| {
                let xn = g.param(s, x);
                let one = g.scalar(1.0);
                let d = g.div(one, xn)?;
                g.sum(d, None)
            },
            &store,
            1e-5,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { op: "div", .. }), "{err:?}");
    }

    /// Runs `grad_check` on a builder that reduces the op output against a fixed random weighting.
    fn check_op(seed: u64, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.register(format!("in{i}"), random(&mut rng, s)).unwrap())
            .collect();
        let weight_seed = rng.random::<u64>();
        let report = grad_check(
            |g, s| {
                let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(s, id)).collect();
                let out = build(g, &nodes);
                let shape = g.shape(out).to_vec();
                let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
                let w = g.constant(random(&mut wr, &shape));
                let prod = g.mul(out, w)?;
                g.sum(prod, None)
            },
            &store,
            1e-5,
            None,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn every_op_matches_finite_differences() {
        type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, n| g.matmul(n[0], n[1]).unwrap())),
            ("add", vec![vec![3, 4], vec![4]], Box::new(|g, n| g.add(n[0], n[1]).unwrap())),
            ("sub", vec![vec![3, 4], vec![3, 1]], Box::new(|g, n| g.sub(n[0], n[1]).unwrap())),
            ("mul", vec![vec![2, 3, 4], vec![3, 1]], Box::new(|g, n| g.mul(n[0], n[1]).unwrap())),
            (
                "div",
                vec![vec![3, 4], vec![3, 4]],
                Box::new(|g, n| {
                    let b = g.abs(n[1]).unwrap();
                    let one = g.scalar(1.0);
                    let b = g.add(b, one).unwrap();
                    g.div(n[0], b).unwrap()
                }),
            ),
            ("concat", vec![vec![2, 3], vec![2, 2]], Box::new(|g, n| g.concat(&[n[0], n[1]], 1).unwrap())),
            ("concat0", vec![vec![2, 3], vec![1, 3]], Box::new(|g, n| g.concat(&[n[0], n[1]], 0).unwrap())),
            ("slice", vec![vec![3, 5]], Box::new(|g, n| g.slice(n[0], 1, 1, 4).unwrap())),
            ("reshape", vec![vec![3, 4]], Box::new(|g, n| g.reshape(n[0], &[2, 6]).unwrap())),
            ("sigmoid", vec![vec![3, 4]], Box::new(|g, n| g.sigmoid(n[0]).unwrap())),
            ("tanh", vec![vec![3, 4]], Box::new(|g, n| g.tanh(n[0]).unwrap())),
            ("relu", vec![vec![3, 4]], Box::new(|g, n| g.relu(n[0]).unwrap())),
            ("softplus", vec![vec![3, 4]], Box::new(|g, n| g.softplus(n[0]).unwrap())),
            ("sin", vec![vec![3, 4]], Box::new(|g, n| g.sin(n[0]).unwrap())),
            ("cos", vec![vec![3, 4]], Box::new(|g, n| g.cos(n[0]).unwrap())),
            ("abs", vec![vec![3, 4]], Box::new(|g, n| g.abs(n[0]).unwrap())),
            (
                "log",
                vec![vec![3, 4]],
                Box::new(|g, n| {
                    let sq = g.mul(n[0], n[0]).unwrap();
                    let one = g.scalar(0.5);
                    let p = g.add(sq, one).unwrap();
                    g.log(p, 1e-12).unwrap()
                }),
            ),
            ("scale", vec![vec![3, 4]], Box::new(|g, n| g.scale(n[0], -2.5).unwrap())),
            ("softmax1", vec![vec![3, 4]], Box::new(|g, n| g.softmax(n[0], 1).unwrap())),
            ("softmax0", vec![vec![3, 4]], Box::new(|g, n| g.softmax(n[0], 0).unwrap())),
            ("layer-norm", vec![vec![3, 6]], Box::new(|g, n| g.layer_norm(n[0], 1).unwrap())),
            ("sum-axis", vec![vec![2, 3, 4]], Box::new(|g, n| g.sum(n[0], Some(1)).unwrap())),
            ("mean-axis", vec![vec![2, 3, 4]], Box::new(|g, n| g.mean(n[0], Some(2)).unwrap())),
            ("mean-all", vec![vec![2, 3]], Box::new(|g, n| g.mean(n[0], None).unwrap())),
            ("gather", vec![vec![4, 3]], Box::new(|g, n| g.gather_rows(n[0], vec![2, 0, 2, 3]).unwrap())),
            (
                "scatter",
                vec![vec![5, 3]],
                Box::new(|g, n| g.scatter_add_rows(n[0], vec![1, 0, 1, 3, 1], 4).unwrap()),
            ),
            (
                "segment-softmax",
                vec![vec![6, 2]],
                Box::new(|g, n| g.segment_softmax(n[0], vec![0, 1, 0, 2, 1, 0], 3).unwrap()),
            ),
        ];
        for (name, shapes, build) in &cases {
            let shapes: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            for seed in 0..20 {
                let err = check_op(seed, &shapes, build);
                assert!(err < 1e-4, "{name} seed {seed}: rel error {err}");
            }
        }
    }

    #[test]
    fn scatter_add_is_permutation_invariant_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = random(&mut rng, &[40, 5]);
        let index: Vec<usize> = (0..40).map(|_| rng.random_range(0..6)).collect();
        let mut order: Vec<usize> = (0..40).collect();
        for i in (1..40).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted =
            NdArray::from_rows(&order.iter().map(|&i| rows.row(i).to_vec()).collect::<Vec<_>>(), 5).unwrap();
        let pidx: Vec<usize> = order.iter().map(|&i| index[i]).collect();
        let mut g = Graph::new();
        let a = g.constant(rows);
        let b = g.constant(permuted);
        let sa = g.scatter_add_rows(a, index, 6).unwrap();
        let sb = g.scatter_add_rows(b, pidx, 6).unwrap();
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, &[10, 7]).map(|v| v * 30.0));
        let s = g.softmax(a, 1).unwrap();
        let v = g.value(s);
        for r in 0..10 {
            let row = v.row(r);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
