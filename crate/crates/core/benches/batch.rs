//! Per-sample forward and backward over one training batch, data-parallel
//! against the sequential fallback.

use criterion::{criterion_group, criterion_main, Criterion};

use himap::dataset::{prepare, Sample};
use himap::diffcore::Graph;
use himap::model::{AblationFlags, Model, ModelConfig, ModelKind};
use himap::objective::LossWeights;
use himap::par;
use himap::scenario::{generate_corpus, GeneratorConfig};
use himap::trainkit::sample_loss;

fn gradients(model: &Model, s: &Sample) -> f64 {
    let mut g = Graph::new();
    let l = sample_loss(model, &mut g, &model.store, s, None, &LossWeights::default()).expect("loss builds");
    let grads = g.backward(l.total, &model.store).expect("backward runs");
    g.value(l.total).item() + grads.global_norm()
}

fn bench(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let corpus = generate_corpus(&GeneratorConfig::default(), 0, 8).expect("valid generator");
    let batch: Vec<Sample> = prepare(&corpus, &cfg).expect("prepares");
    let model = Model::new(cfg, ModelKind::Himap { flags: AblationFlags::full() }, 0).expect("valid model");

    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(&batch, |s| gradients(&model, s)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(&batch, |s| gradients(&model, s)))
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
